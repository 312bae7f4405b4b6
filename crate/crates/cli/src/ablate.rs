//! The ablation grid: branch configuration, projection axes, projection
//! method, first-layer grid resolution, conv module variants, and fusion
//! strategies. Each row trains with several seeds on synthetic scenes and
//! reports the mean validation mIoU plus the row's median module forward
//! time.

use std::fmt::Write as _;

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ppcnn::conv2dblock::ConvVariant;
use ppcnn::fusion::FusionKind;
use ppcnn::numkernel::{Mode, Tensor};
use ppcnn::pointgrid::{Axis, PointCloud};
use ppcnn::ppconv::{ppconv_forward, PPConv, PPConvConfig};
use ppcnn::projection::ProjectionMethod;

use crate::bench::time_median;
use crate::config::RunConfig;
use crate::gradcheck_cmd::fusion_name;
use crate::train::train_model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationGrid {
    Branches,
    Axes,
    Projection,
    Resolution,
    Conv,
    Fusion,
}

impl AblationGrid {
    pub fn parse(name: &str) -> Option<Vec<AblationGrid>> {
        Some(match name {
            "branches" => vec![AblationGrid::Branches],
            "axes" => vec![AblationGrid::Axes],
            "projection" => vec![AblationGrid::Projection],
            "resolution" => vec![AblationGrid::Resolution],
            "conv" => vec![AblationGrid::Conv],
            "fusion" => vec![AblationGrid::Fusion],
            "all" => vec![
                AblationGrid::Branches,
                AblationGrid::Axes,
                AblationGrid::Projection,
                AblationGrid::Resolution,
                AblationGrid::Conv,
                AblationGrid::Fusion,
            ],
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationGrid::Branches => "branches",
            AblationGrid::Axes => "axes",
            AblationGrid::Projection => "projection",
            AblationGrid::Resolution => "resolution",
            AblationGrid::Conv => "conv",
            AblationGrid::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub grid: String,
    pub row: String,
    pub seeds: usize,
    pub mean_val_miou: f64,
    pub per_seed_miou: Vec<f64>,
    pub median_forward_ms: f64,
    pub error: Option<String>,
}

/// The configurations of one grid, as (row label, config patch) pairs.
pub fn grid_rows(grid: AblationGrid, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut rows = Vec::new();
    let mut with = |label: &str, patch: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        patch(&mut cfg);
        rows.push((label.to_string(), cfg));
    };
    match grid {
        AblationGrid::Branches => {
            with("both", &|_| {});
            with("no_projection", &|c| {
                c.ppconv.axes.clear();
                c.ppconv.include_point_branch = true;
            });
            with("no_point", &|c| {
                c.ppconv.include_point_branch = false;
            });
        }
        AblationGrid::Axes => {
            with("z", &|c| c.ppconv.axes = vec![Axis::Z]);
            with("x,z", &|c| c.ppconv.axes = vec![Axis::X, Axis::Z]);
            with("x,y,z", &|c| c.ppconv.axes = vec![Axis::X, Axis::Y, Axis::Z]);
        }
        AblationGrid::Projection => {
            with("average", &|c| c.ppconv.projection = ProjectionMethod::Average);
            with("bilinear", &|c| {
                c.ppconv.projection = ProjectionMethod::Bilinear
            });
            with("pointnet", &|c| {
                c.ppconv.projection = ProjectionMethod::Pointnet
            });
        }
        AblationGrid::Resolution => {
            for r in [32usize, 48, 64, 96] {
                with(&r.to_string(), &|c| {
                    c.ppconv.first_layer_resolution = Some(r)
                });
            }
        }
        AblationGrid::Conv => {
            with("plain", &|c| c.ppconv.conv_variant = ConvVariant::Plain);
            with("residual", &|c| c.ppconv.conv_variant = ConvVariant::Residual);
            with("residual_se", &|c| {
                c.ppconv.conv_variant = ConvVariant::ResidualSe
            });
        }
        AblationGrid::Fusion => {
            for kind in [FusionKind::Concat, FusionKind::Iwf, FusionKind::Caf] {
                with(fusion_name(kind), &|c| c.ppconv.fusion = kind);
            }
        }
    }
    rows
}

/// Median forward time of one PPConv module under the row's configuration,
/// at the row's block size.
fn row_forward_ms(cfg: &RunConfig) -> Result<f64> {
    let n = cfg.block_points().min(4096);
    let c_in = 16usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    use rand::Rng;
    let coords = (0..n)
        .map(|_| {
            [
                rng.gen::<f32>() * 1.5,
                rng.gen::<f32>() * 1.5,
                rng.gen::<f32>() * 1.5,
            ]
        })
        .collect();
    let pc = PointCloud::new(coords, Tensor::randn(vec![n, c_in], 1.0, &mut rng), None)?;
    let ppcfg = PPConvConfig {
        c_in,
        c_out: 32,
        axes: cfg.ppconv.axes.clone(),
        resolution: cfg.ppconv.first_layer_resolution.unwrap_or(16),
        projection: cfg.ppconv.projection,
        backprojection: cfg.ppconv.backprojection,
        conv_variant: cfg.ppconv.conv_variant,
        fusion: cfg.ppconv.fusion,
        include_point_branch: cfg.ppconv.include_point_branch,
    };
    let mut layer = PPConv::new(ppcfg, &mut rng)?;
    let (median, _) = time_median(5, 20, || {
        ppconv_forward(&pc, &mut layer, Mode::Eval).expect("forward");
    });
    Ok(median)
}

/// Run the requested grids; row failures are recorded and the grid continues.
pub fn run_ablate(
    base: &RunConfig,
    grids: &[AblationGrid],
    seeds: usize,
) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    for &grid in grids {
        for (label, cfg) in grid_rows(grid, base) {
            let mut per_seed = Vec::with_capacity(seeds);
            let mut error = None;
            for s in 0..seeds {
                let mut run = cfg.clone();
                run.seed = base.seed.wrapping_add(1 + s as u64);
                match train_model(&run) {
                    Ok((_, stats, _)) => per_seed.push(stats.best_val_miou),
                    Err(e) => {
                        error = Some(format!("seed {s}: {e}"));
                        break;
                    }
                }
            }
            let mean = if per_seed.is_empty() {
                f64::NAN
            } else {
                per_seed.iter().sum::<f64>() / per_seed.len() as f64
            };
            let median_forward_ms = match row_forward_ms(&cfg) {
                Ok(ms) => ms,
                Err(e) => {
                    error.get_or_insert_with(|| format!("timing: {e}"));
                    f64::NAN
                }
            };
            out.push(AblationRow {
                grid: grid.name().to_string(),
                row: label,
                seeds: per_seed.len(),
                mean_val_miou: mean,
                per_seed_miou: per_seed,
                median_forward_ms,
                error,
            });
        }
    }
    Ok(out)
}

pub fn ablate_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("grid,row,seeds,mean_val_miou,median_forward_ms,error\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.3},{}",
            r.grid,
            r.row,
            r.seeds,
            r.mean_val_miou,
            r.median_forward_ms,
            r.error.as_deref().unwrap_or("")
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_emit_expected_rows() {
        let base = RunConfig::default();
        let branches: Vec<String> = grid_rows(AblationGrid::Branches, &base)
            .into_iter()
            .map(|(l, _)| l)
            .collect();
        assert_eq!(branches, vec!["both", "no_projection", "no_point"]);

        let axes: Vec<String> = grid_rows(AblationGrid::Axes, &base)
            .into_iter()
            .map(|(l, _)| l)
            .collect();
        assert_eq!(axes, vec!["z", "x,z", "x,y,z"]);

        let fusion: Vec<String> = grid_rows(AblationGrid::Fusion, &base)
            .into_iter()
            .map(|(l, _)| l)
            .collect();
        assert_eq!(fusion, vec!["concat", "iwf", "caf"]);

        let res: Vec<String> = grid_rows(AblationGrid::Resolution, &base)
            .into_iter()
            .map(|(l, _)| l)
            .collect();
        assert_eq!(res, vec!["32", "48", "64", "96"]);
    }
}
