use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ppcnn_cli::{
    ablate_csv, bench_csv, gradcheck_csv, run_ablate, run_bench, run_eval, run_gradcheck,
    run_predict, run_train, AblationGrid, BenchOptions, RunConfig,
};

#[derive(Parser)]
#[command(name = "ppcnn", about = "Projection-based point convolution workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// Data-worker threads (compute stays single-threaded).
    #[arg(long)]
    threads: Option<usize>,
    /// Pin all sampling to deterministic starts.
    #[arg(long)]
    deterministic: bool,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic scenes; writes checkpoint, CSV log and summary.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the config's validation scenes.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Label a text point file (one predicted label per line).
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Time the module and baselines; emits CSV medians.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Measured iterations per row (>= 20).
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Warm-up iterations per row (>= 5).
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Skip the full-network forward row (the slowest one).
        #[arg(long)]
        no_full_network: bool,
    },
    /// Verify every backward rule with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run an ablation grid over synthetic training runs.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// branches | axes | projection | resolution | conv | fusion | all
        #[arg(long, default_value = "all")]
        grid: String,
        /// Training seeds per row.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.resolve()?;
            let outcome = run_train(&cfg, &common.out)?;
            println!(
                "trained {} steps: best val mIoU {:.4}, final train accuracy {:.4}",
                cfg.steps, outcome.stats.best_val_miou, outcome.stats.final_train_accuracy
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
            Ok(true)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let outcome = run_eval(&cfg, &checkpoint, &common.out)?;
            println!(
                "mIoU {:.4}, accuracy {:.4} over {} points",
                outcome.miou, outcome.accuracy, outcome.points
            );
            Ok(true)
        }
        Command::Predict {
            common,
            checkpoint,
            input,
            output,
        } => {
            let cfg = common.resolve()?;
            cfg.write_resolved(&common.out)?;
            run_predict(&cfg, &checkpoint, &input, &output)?;
            println!("labels written to {}", output.display());
            Ok(true)
        }
        Command::Bench {
            common,
            iters,
            warmup,
            no_full_network,
        } => {
            let cfg = common.resolve()?;
            cfg.write_resolved(&common.out)?;
            let rows = run_bench(&BenchOptions {
                warmup,
                iters,
                seed: cfg.seed,
                full_network: !no_full_network,
            })?;
            let csv = bench_csv(&rows);
            print!("{csv}");
            std::fs::write(common.out.join("bench.csv"), csv)?;
            Ok(true)
        }
        Command::Gradcheck { common } => {
            let cfg = common.resolve()?;
            cfg.write_resolved(&common.out)?;
            let rows = run_gradcheck(cfg.seed)?;
            let csv = gradcheck_csv(&rows);
            print!("{csv}");
            std::fs::write(common.out.join("gradcheck.csv"), csv)?;
            Ok(rows.iter().all(|r| r.pass))
        }
        Command::Ablate {
            common,
            grid,
            seeds,
        } => {
            let cfg = common.resolve()?;
            cfg.write_resolved(&common.out)?;
            let grids = AblationGrid::parse(&grid)
                .with_context(|| format!("unknown ablation grid {grid:?}"))?;
            let rows = run_ablate(&cfg, &grids, seeds)?;
            let csv = ablate_csv(&rows);
            print!("{csv}");
            std::fs::write(common.out.join("ablation.csv"), csv)?;
            Ok(rows.iter().all(|r| r.error.is_none()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
