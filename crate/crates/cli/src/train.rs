//! Training, evaluation and prediction drivers over synthetic scenes and
//! text point files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppcnn::backbone::{build_network, load_checkpoint, save_checkpoint, Adam, Network};
use ppcnn::datametrics::{
    block_at_center, compute_miou, generate_synthetic_scene, miou_csv, sample_block_with, Block,
    Scene,
};
use ppcnn::numkernel::{Mode, Tape, Tensor};

use crate::config::RunConfig;

/// One step in hashing (seed, tags...) into an independent RNG stream.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed);
    for &t in tags {
        state = splitmix(state ^ t.wrapping_mul(0xA24BAED4963EE407));
    }
    ChaCha8Rng::seed_from_u64(state)
}

const TAG_TRAIN_SCENE: u64 = 1;
const TAG_VAL_SCENE: u64 = 2;
const TAG_BLOCK: u64 = 3;
const TAG_FPS: u64 = 4;
const TAG_EVAL: u64 = 5;

pub fn train_scenes(cfg: &RunConfig) -> Result<Vec<Scene<f32>>> {
    (0..cfg.data.train_scenes)
        .map(|i| {
            generate_synthetic_scene(
                derive_rng(cfg.seed, &[TAG_TRAIN_SCENE, i as u64]).gen(),
                cfg.data.class_count,
                cfg.data.points_per_scene,
            )
            .map_err(Into::into)
        })
        .collect()
}

pub fn val_scenes(cfg: &RunConfig) -> Result<Vec<Scene<f32>>> {
    (0..cfg.data.val_scenes)
        .map(|i| {
            generate_synthetic_scene(
                derive_rng(cfg.seed, &[TAG_VAL_SCENE, i as u64]).gen(),
                cfg.data.class_count,
                cfg.data.points_per_scene,
            )
            .map_err(Into::into)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub best_val_miou: f64,
    pub final_val_miou: f64,
    pub final_train_miou: f64,
    pub final_train_accuracy: f64,
}

/// Sample the step's batch; with `threads > 1` blocks are drawn by worker
/// threads, with identical per-block RNG streams either way.
fn sample_batch(
    cfg: &RunConfig,
    scenes: &[Scene<f32>],
    step: usize,
) -> Result<Vec<Block<f32>>> {
    let side = cfg.block_side();
    let count = cfg.block_points();
    let draw = |i: usize| -> Result<Block<f32>> {
        let scene = &scenes[(step * cfg.batch_size + i) % scenes.len()];
        let mut rng = derive_rng(cfg.seed, &[TAG_BLOCK, step as u64, i as u64]);
        sample_block_with(scene, side, count, &mut rng)
            .with_context(|| format!("sampling block {i} at step {step}"))
    };
    if cfg.threads > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..cfg.batch_size)
                .map(|i| scope.spawn(move || draw(i)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    } else {
        (0..cfg.batch_size).map(draw).collect()
    }
}

/// Train a network per the config; pure in-memory form used by both the CLI
/// command and the ablation grid.
pub fn train_model(cfg: &RunConfig) -> Result<(Network<f32>, TrainStats, Vec<LogRow>)> {
    train_model_with(cfg, |_, _| Ok(()))
}

/// As [`train_model`], invoking `on_checkpoint(step, net)` every
/// `checkpoint_every` steps.
pub fn train_model_with(
    cfg: &RunConfig,
    mut on_checkpoint: impl FnMut(usize, &Network<f32>) -> Result<()>,
) -> Result<(Network<f32>, TrainStats, Vec<LogRow>)> {
    let spec = cfg.model_spec()?;
    let mut net: Network<f32> = build_network(&spec, cfg.seed)?;
    let train = train_scenes(cfg)?;
    let val = val_scenes(cfg)?;
    let mut adam = Adam::new(cfg.optimizer.clone(), cfg.steps);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut best_val = 0.0f64;

    for step in 0..cfg.steps {
        let blocks = sample_batch(cfg, &train, step)?;
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(blocks.len());
        let mut correct = 0usize;
        let mut total = 0usize;
        for (bi, block) in blocks.iter().enumerate() {
            let labels = block
                .cloud
                .labels
                .as_ref()
                .ok_or_else(|| anyhow!("training blocks must carry labels"))?;
            let feats = tape.constant(block.cloud.features.clone());
            let fps_seed = if cfg.deterministic {
                0
            } else {
                derive_rng(cfg.seed, &[TAG_FPS, step as u64, bi as u64]).gen()
            };
            let logits = net
                .forward(&mut tape, &block.cloud.coords, feats, Mode::Train, fps_seed)
                .map_err(|e| anyhow!("step {step} block {bi}: {e}"))?;
            let values = tape.value(logits);
            for (r, &label) in labels.iter().enumerate() {
                let row = values.row(r);
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i as u32)
                    .unwrap_or(0);
                correct += usize::from(pred == label);
                total += 1;
            }
            let loss = tape.cross_entropy(logits, labels)?;
            losses.push(loss);
        }
        let loss = tape.mean_scalars(&losses)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        tape.backward(loss).map_err(|e| {
            anyhow!(
                "non-finite loss at step {step}; offending batch seeds {:?}: {e}",
                (0..cfg.batch_size)
                    .map(|i| format!("({},{TAG_BLOCK},{step},{i})", cfg.seed))
                    .collect::<Vec<_>>()
            )
        })?;
        let grads: HashMap<String, Tensor<f32>> = tape.param_grads().into_iter().collect();
        adam.step(&mut net, "net", &grads);
        log.push(LogRow {
            step,
            loss: loss_value,
            train_accuracy: correct as f64 / total.max(1) as f64,
        });

        let at_checkpoint = (step + 1) % cfg.checkpoint_every == 0;
        if at_checkpoint {
            on_checkpoint(step + 1, &net)?;
            if !val.is_empty() {
                let outcome = evaluate_scenes(&mut net, &val, cfg, TAG_EVAL)?;
                best_val = best_val.max(outcome.miou);
            }
        }
    }

    let final_val = if val.is_empty() {
        0.0
    } else {
        let outcome = evaluate_scenes(&mut net, &val, cfg, TAG_EVAL)?;
        outcome.miou
    };
    best_val = best_val.max(final_val);
    let train_out = evaluate_scenes(&mut net, &train, cfg, TAG_EVAL)?;
    Ok((
        net,
        TrainStats {
            best_val_miou: best_val,
            final_val_miou: final_val,
            final_train_miou: train_out.miou,
            final_train_accuracy: train_out.accuracy,
        },
        log,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stats: TrainStats,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Full training command: trains, writes checkpoints every
/// `checkpoint_every` steps plus a final one, the CSV log (whose final line
/// records the best validation mIoU) and the resolved config.
pub fn run_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.write_resolved(out_dir)?;
    let trained = train_model_with(cfg, |step, net| {
        save_checkpoint(&out_dir.join(format!("checkpoint_step{step}.ppck")), net)
            .context("writing periodic checkpoint")
    });
    let (net, stats, log) = match trained {
        Ok(ok) => ok,
        Err(err) => {
            // Leave the abort reason (including the offending batch seeds)
            // next to the outputs before bubbling it up.
            let _ = std::fs::write(out_dir.join("failure.txt"), format!("{err:#}\n"));
            return Err(err);
        }
    };

    let checkpoint = out_dir.join("checkpoint.ppck");
    save_checkpoint(&checkpoint, &net).context("writing checkpoint")?;

    let mut csv = String::from("step,loss,train_accuracy\n");
    for row in &log {
        writeln!(csv, "{},{:.6},{:.6}", row.step, row.loss, row.train_accuracy)?;
    }
    writeln!(csv, "best_val_miou,{:.6},", stats.best_val_miou)?;
    let log_path = out_dir.join("train_log.csv");
    std::fs::write(&log_path, csv)?;

    let summary = serde_json::json!({
        "best_val_miou": stats.best_val_miou,
        "final_val_miou": stats.final_val_miou,
        "final_train_miou": stats.final_train_miou,
        "final_train_accuracy": stats.final_train_accuracy,
    });
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(TrainOutcome {
        stats,
        checkpoint,
        log_path,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub accuracy: f64,
    pub points: usize,
}

/// Per-point predictions for one scene: overlapping blocks at half-side
/// stride, mean-logit votes, nearest-covered fallback for missed points.
pub fn predict_scene(
    net: &mut Network<f32>,
    scene: &Scene<f32>,
    cfg: &RunConfig,
    tag: u64,
) -> Result<Vec<u32>> {
    let side = cfg.block_side();
    let count = cfg.block_points();
    let k = net.class_count();
    let n = scene.len();
    let mut votes = vec![0.0f64; n * k];
    let mut hits = vec![0u32; n];

    let centers_axis = |extent: f64, origin: f64| -> Vec<f64> {
        if extent <= side {
            return vec![origin + extent / 2.0];
        }
        let mut cs = Vec::new();
        let mut c = origin + side / 2.0;
        let last = origin + extent - side / 2.0;
        while c < last - 1e-9 {
            cs.push(c);
            c += side / 2.0;
        }
        cs.push(last);
        cs
    };

    let xs = centers_axis(scene.extent[0], scene.origin[0]);
    let ys = centers_axis(scene.extent[1], scene.origin[1]);
    let mut pos_index = 0u64;
    for &cx in &xs {
        for &cy in &ys {
            pos_index += 1;
            let mut rng = derive_rng(cfg.seed, &[tag, 17, pos_index]);
            let Some(block) = block_at_center(scene, [cx, cy], side, count, &mut rng) else {
                continue;
            };
            let mut tape = Tape::new();
            let feats = tape.constant(block.cloud.features.clone());
            let logits = net.forward(&mut tape, &block.cloud.coords, feats, Mode::Eval, 0)?;
            let values = tape.value(logits);
            for (row, &src) in block.source_indices.iter().enumerate() {
                let src = src as usize;
                for c in 0..k {
                    votes[src * k + c] += values.row(row)[c] as f64;
                }
                hits[src] += 1;
            }
        }
    }

    let mut preds = vec![0u32; n];
    let covered: Vec<usize> = (0..n).filter(|&i| hits[i] > 0).collect();
    if covered.is_empty() {
        anyhow::bail!("no block covered any point of the scene");
    }
    for i in 0..n {
        if hits[i] > 0 {
            let row = &votes[i * k..(i + 1) * k];
            preds[i] = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite votes"))
                .map(|(c, _)| c as u32)
                .expect("nonempty row");
        }
    }
    for i in 0..n {
        if hits[i] == 0 {
            // Nearest covered point lends its label.
            let p = &scene.cloud.coords[i];
            let nearest = covered
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da = dist2(p, &scene.cloud.coords[a]);
                    let db = dist2(p, &scene.cloud.coords[b]);
                    da.partial_cmp(&db).expect("finite")
                })
                .expect("nonempty covered set");
            preds[i] = preds[nearest];
        }
    }
    Ok(preds)
}

fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let dx = (a[0] - b[0]) as f64;
    let dy = (a[1] - b[1]) as f64;
    let dz = (a[2] - b[2]) as f64;
    dx * dx + dy * dy + dz * dz
}

/// Predict every scene and score a pooled confusion over all points.
pub fn evaluate_scenes(
    net: &mut Network<f32>,
    scenes: &[Scene<f32>],
    cfg: &RunConfig,
    tag: u64,
) -> Result<EvalOutcome> {
    if scenes.is_empty() {
        anyhow::bail!("no scenes to evaluate");
    }
    let mut all_preds = Vec::new();
    let mut all_gt = Vec::new();
    for scene in scenes {
        let labels = scene
            .cloud
            .labels
            .as_ref()
            .ok_or_else(|| anyhow!("evaluation scenes must carry labels"))?;
        let preds = predict_scene(net, scene, cfg, tag)?;
        all_preds.extend_from_slice(&preds);
        all_gt.extend_from_slice(labels);
    }
    let (per_class, miou) = compute_miou(&all_preds, &all_gt, cfg.data.class_count)?;
    let correct = all_preds
        .iter()
        .zip(&all_gt)
        .filter(|(p, g)| p == g)
        .count();
    Ok(EvalOutcome {
        miou,
        per_class,
        accuracy: correct as f64 / all_gt.len() as f64,
        points: all_gt.len(),
    })
}

/// Evaluation command: loads a checkpoint, scores the config's validation
/// scenes, writes the per-class CSV.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<EvalOutcome> {
    cfg.write_resolved(out_dir)?;
    let mut net: Network<f32> = load_checkpoint(checkpoint).context("loading checkpoint")?;
    if net.class_count() != cfg.data.class_count {
        anyhow::bail!(
            "checkpoint has {} classes, config declares {}",
            net.class_count(),
            cfg.data.class_count
        );
    }
    let scenes = val_scenes(cfg)?;
    let outcome = evaluate_scenes(&mut net, &scenes, cfg, TAG_EVAL)?;
    std::fs::write(
        out_dir.join("metrics.csv"),
        miou_csv(&outcome.per_class, outcome.miou),
    )?;
    Ok(outcome)
}

/// Prediction command: text points in, one label per line out.
pub fn run_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
) -> Result<()> {
    let mut net: Network<f32> = load_checkpoint(checkpoint).context("loading checkpoint")?;
    let scene: Scene<f32> =
        ppcnn::datametrics::load_points_text(input, net.class_count()).context("reading points")?;
    let preds = predict_scene(&mut net, &scene, cfg, TAG_EVAL)?;
    let mut text = String::with_capacity(preds.len() * 3);
    for p in preds {
        writeln!(text, "{p}")?;
    }
    std::fs::write(output, text)?;
    Ok(())
}
