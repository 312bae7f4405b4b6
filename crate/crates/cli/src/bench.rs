//! Wall-clock benchmark harness: warm-up iterations followed by measured
//! iterations, medians and median absolute deviations, batch 1, CSV output.
//! Includes the exhaustive O(N^2) k-NN aggregation baseline the grid
//! aggregation is compared against.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppcnn::backbone::{build_network, ModelSpec, Network, NetworkSpec, PPConvTemplate};
use ppcnn::conv2dblock::ConvVariant;
use ppcnn::fusion::FusionKind;
use ppcnn::numkernel::{kernels, Mode, Tape, Tensor};
use ppcnn::pointgrid::{Axis, PointCloud};
use ppcnn::ppconv::{ppconv_forward, PPConv, PPConvConfig};
use ppcnn::projection::{BackprojectionMode, ProjectionMethod};

pub const MIN_WARMUP: usize = 5;
pub const MIN_ITERS: usize = 20;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub name: String,
    pub warmup: usize,
    pub iters: usize,
    /// Per-iteration wall times in milliseconds, measurement order.
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    pub mad_ms: f64,
    pub points: usize,
    pub points_per_sec: f64,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
    /// Also time the full s3dis-configuration network forward (slow).
    pub full_network: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: MIN_WARMUP,
            iters: MIN_ITERS,
            seed: 0,
            full_network: false,
        }
    }
}

impl BenchOptions {
    fn clamped(&self) -> (usize, usize) {
        (self.warmup.max(MIN_WARMUP), self.iters.max(MIN_ITERS))
    }
}

/// Median and median absolute deviation of per-iteration wall times.
pub fn time_median(warmup: usize, iters: usize, f: impl FnMut()) -> (f64, f64) {
    let (m, mad, _) = time_series(warmup, iters, f);
    (m, mad)
}

/// As [`time_median`], also returning the raw per-iteration times (ms).
pub fn time_series(warmup: usize, iters: usize, mut f: impl FnMut()) -> (f64, f64, Vec<f64>) {
    for _ in 0..warmup {
        f();
    }
    let mut raw = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        f();
        raw.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut times = raw.clone();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let median = times[times.len() / 2];
    let mut devs: Vec<f64> = times.iter().map(|t| (t - median).abs()).collect();
    devs.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    (median, devs[devs.len() / 2], raw)
}

fn random_cloud(n: usize, c: usize, seed: u64) -> PointCloud<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..n)
        .map(|_| {
            [
                rng.gen::<f32>() * 1.5,
                rng.gen::<f32>() * 1.5,
                rng.gen::<f32>() * 1.5,
            ]
        })
        .collect();
    PointCloud::new(coords, Tensor::randn(vec![n, c], 1.0, &mut rng), None).unwrap()
}

fn ppconv_cfg(
    c_in: usize,
    c_out: usize,
    axes: Vec<Axis>,
    r: usize,
    fusion: FusionKind,
) -> PPConvConfig {
    PPConvConfig {
        c_in,
        c_out,
        axes,
        resolution: r,
        projection: ProjectionMethod::Pointnet,
        backprojection: BackprojectionMode::DistanceWeighted,
        conv_variant: ConvVariant::ResidualSe,
        fusion,
        include_point_branch: true,
    }
}

/// Exhaustive O(N^2) neighbor scan plus a shared MLP and max over the k
/// gathered neighbors; the pattern grid aggregation replaces.
pub fn naive_knn_aggregate(
    pc: &PointCloud<f32>,
    k: usize,
    w: &Tensor<f32>,
    b: &Tensor<f32>,
) -> Tensor<f32> {
    let n = pc.len();
    let c = pc.feature_channels();
    // k nearest by brute-force scan per point.
    let mut neighbors = vec![0u32; n * k];
    let mut best_d = vec![f32::INFINITY; k];
    for i in 0..n {
        best_d.iter_mut().for_each(|d| *d = f32::INFINITY);
        let slot = &mut neighbors[i * k..(i + 1) * k];
        let pi = &pc.coords[i];
        for (j, pj) in pc.coords.iter().enumerate() {
            let dx = pi[0] - pj[0];
            let dy = pi[1] - pj[1];
            let dz = pi[2] - pj[2];
            let d = dx * dx + dy * dy + dz * dz;
            // Insertion into the running top-k.
            let mut worst = 0usize;
            for t in 1..k {
                if best_d[t] > best_d[worst] {
                    worst = t;
                }
            }
            if d < best_d[worst] {
                best_d[worst] = d;
                slot[worst] = j as u32;
            }
        }
    }
    // Gather [neighbor feature | relative coords], shared MLP, max per point.
    let mut gathered = Tensor::zeros(vec![n * k, c + 3]);
    for i in 0..n {
        for t in 0..k {
            let j = neighbors[i * k + t] as usize;
            let row = &mut gathered.data_mut()[(i * k + t) * (c + 3)..(i * k + t + 1) * (c + 3)];
            row[..c].copy_from_slice(pc.features.row(j));
            for a in 0..3 {
                row[c + a] = pc.coords[j][a] - pc.coords[i][a];
            }
        }
    }
    let h = kernels::linear(&gathered, w, b).expect("baseline mlp");
    let h = kernels::activation(kernels::ActKind::Relu, &h);
    let ids: Vec<u32> = (0..n * k).map(|r| (r / k) as u32).collect();
    let (out, _) = kernels::segmented_max(&h, &ids, n).expect("baseline pool");
    out
}

pub fn run_bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let (warmup, iters) = opts.clamped();
    let mut rows = Vec::new();
    let mut push = |name: String, points: usize, timing: (f64, f64, Vec<f64>)| {
        let (median, mad, times_ms) = timing;
        rows.push(BenchRow {
            name,
            warmup,
            iters,
            times_ms,
            median_ms: median,
            mad_ms: mad,
            points,
            points_per_sec: points as f64 / (median / 1e3),
        });
    };

    // Branch-count scaling (the runtime side of the projection-axes grid).
    let axes_rows = [
        ("ppconv_z_n4096", vec![Axis::Z]),
        ("ppconv_xz_n4096", vec![Axis::X, Axis::Z]),
        ("ppconv_xyz_n4096", vec![Axis::X, Axis::Y, Axis::Z]),
    ];
    let pc = random_cloud(4096, 16, opts.seed);
    for (name, axes) in axes_rows {
        let mut layer = PPConv::new(
            ppconv_cfg(16, 32, axes, 32, FusionKind::Concat),
            &mut ChaCha8Rng::seed_from_u64(opts.seed),
        )?;
        let timing = time_series(warmup, iters, || {
            ppconv_forward(&pc, &mut layer, Mode::Eval).expect("forward");
        });
        push(name.to_string(), 4096, timing);
    }

    // Fusion strategies at three branches.
    let pc = random_cloud(4096, 16, opts.seed + 1);
    for (name, fusion) in [
        ("ppconv_xyz_fusion_concat_n4096", FusionKind::Concat),
        ("ppconv_xyz_fusion_iwf_n4096", FusionKind::Iwf),
        ("ppconv_xyz_fusion_caf_n4096", FusionKind::Caf),
    ] {
        let mut layer = PPConv::new(
            ppconv_cfg(16, 32, vec![Axis::X, Axis::Y, Axis::Z], 32, fusion),
            &mut ChaCha8Rng::seed_from_u64(opts.seed),
        )?;
        let timing = time_series(warmup, iters, || {
            ppconv_forward(&pc, &mut layer, Mode::Eval).expect("forward");
        });
        push(name.to_string(), 4096, timing);
    }

    // Grid aggregation vs. the exhaustive k-NN baseline at N=8192, C=32.
    let pc = random_cloud(8192, 32, opts.seed + 2);
    let mut layer = PPConv::new(
        ppconv_cfg(32, 32, vec![Axis::Z], 64, FusionKind::Concat),
        &mut ChaCha8Rng::seed_from_u64(opts.seed),
    )?;
    let timing = time_series(warmup, iters, || {
        ppconv_forward(&pc, &mut layer, Mode::Eval).expect("forward");
    });
    push("ppconv_z_n8192_c32_r64".into(), 8192, timing);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 3);
    let w = Tensor::<f32>::randn(vec![35, 32], 0.2, &mut rng);
    let b = Tensor::<f32>::zeros(vec![32]);
    let timing = time_series(warmup, iters, || {
        naive_knn_aggregate(&pc, 32, &w, &b);
    });
    push("naive_knn32_n8192_c32".into(), 8192, timing);

    // First-stage grid resolutions (reported; near-flat only on hardware
    // that parallelizes the planar convolutions).
    let pc = random_cloud(8192, 6, opts.seed + 4);
    for r in [32usize, 48, 64, 96] {
        let mut layer = PPConv::new(
            ppconv_cfg(6, 32, vec![Axis::X, Axis::Y, Axis::Z], r, FusionKind::Concat),
            &mut ChaCha8Rng::seed_from_u64(opts.seed),
        )?;
        let timing = time_series(warmup, iters, || {
            ppconv_forward(&pc, &mut layer, Mode::Eval).expect("forward");
        });
        push(format!("ppconv_stage1_r{r}_n8192"), 8192, timing);
    }

    if opts.full_network {
        let spec = ModelSpec {
            network: NetworkSpec::s3dis(),
            ppconv: PPConvTemplate::default(),
        };
        let mut net: Network<f32> = build_network(&spec, opts.seed)?;
        let pc = random_cloud(8192, 6, opts.seed + 5);
        let timing = time_series(warmup, iters, || {
            let mut tape = Tape::new();
            let f = tape.constant(pc.features.clone());
            net.forward(&mut tape, &pc.coords, f, Mode::Eval, 0)
                .expect("forward");
        });
        push("full_network_s3dis_n8192".into(), 8192, timing);
    }

    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out =
        String::from("name,warmup,iters,median_ms,mad_ms,points,points_per_sec\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.3},{:.3},{},{:.0}",
            r.name, r.warmup, r.iters, r.median_ms, r.mad_ms, r.points, r.points_per_sec
        )
        .expect("string write");
    }
    out
}
