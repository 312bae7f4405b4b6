//! Gradient verification across every module boundary: each kernel, each
//! projection method, each conv variant, each fusion strategy, the PPConv
//! module under all fusions, and a full toy network. All units run in f64 at
//! desk sizes (N <= 32, R <= 8).
//!
//! Finite differences are undefined at activation kinks and max-pool ties, so
//! every unit is evaluated at up to three independently seeded operating
//! points (biases jittered off zero) and reports the smallest error seen. A
//! wrong backward rule is systematic and fails at every point — the
//! mutation fixture demonstrates that the floor holds.

use std::fmt::Write as _;

use anyhow::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ppcnn::backbone::{
    build_network, FpSpec, ModelSpec, Network, NetworkSpec, PPConvTemplate, PpLayersSpec, SaSpec,
};
use ppcnn::conv2dblock::{ConvVariant, SeResBlockParams};
use ppcnn::fusion::{FusionInputs, FusionKind, FusionParams};
use ppcnn::nn::jitter_biases;
use ppcnn::numkernel::{grad_check, grad_check_model, ActKind, BnLayout, BnStats, Mode, Tensor};
use ppcnn::pointgrid::{augment_point_features, compute_grid_mapping, Axis, PointCloud};
use ppcnn::ppconv::{PPConv, PPConvConfig};
use ppcnn::projection::{
    backproject_on_tape, project_on_tape, BackprojectionMode, ProjectionMethod,
};

use crate::train::derive_rng;

pub const UNIT_THRESHOLD: f64 = 1e-4;
pub const NETWORK_THRESHOLD: f64 = 1e-3;
pub const MUTATION_FLOOR: f64 = 1e-2;
const OPERATING_POINTS: u64 = 3;

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub unit: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn random_cloud(n: usize, c: usize, rng: &mut ChaCha8Rng) -> PointCloud<f64> {
    let coords = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    PointCloud::new(coords, Tensor::randn(vec![n, c], 1.0, rng), None).unwrap()
}

fn unit_kernel_linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = Tensor::<f64>::randn(vec![6, 4], 1.0, rng);
    let w = Tensor::<f64>::randn(vec![4, 3], 0.7, rng);
    let b = Tensor::<f64>::randn(vec![3], 0.3, rng);
    let r = grad_check(&[w, b], |tape, ids| {
        let xi = tape.constant(x.clone());
        let y = tape.linear(xi, ids[0], ids[1])?;
        let y = tape.activation(ActKind::Sigmoid, y);
        Ok(tape.sum_all(y))
    })?;
    Ok(r.max_rel_err)
}

fn unit_kernel_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = Tensor::<f64>::randn(vec![2, 5, 5], 1.0, rng);
    let k = Tensor::<f64>::randn(vec![3, 2, 3, 3], 0.5, rng);
    let b = Tensor::<f64>::randn(vec![3], 0.3, rng);
    let r = grad_check(&[k, b], |tape, ids| {
        let xi = tape.constant(x.clone());
        let y = tape.conv2d(xi, ids[0], ids[1])?;
        let y = tape.activation(ActKind::Sigmoid, y);
        Ok(tape.sum_all(y))
    })?;
    Ok(r.max_rel_err)
}

fn unit_batchnorm(layout: BnLayout, rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = match layout {
        BnLayout::ChannelsLast => vec![8, 3],
        BnLayout::ChannelsFirst => vec![3, 4, 4],
    };
    let x = Tensor::<f64>::randn(shape, 1.5, rng);
    let gamma = Tensor::<f64>::uniform(vec![3], 0.5, 1.5, rng);
    let beta = Tensor::<f64>::uniform(vec![3], -0.5, 0.5, rng);
    let r = grad_check(&[gamma, beta], move |tape, ids| {
        let xi = tape.constant(x.clone());
        let mut stats = BnStats::identity(3);
        let y = tape.batchnorm(xi, ids[0], ids[1], &mut stats, layout, Mode::Train)?;
        let y = tape.activation(ActKind::Sigmoid, y);
        Ok(tape.sum_all(y))
    })?;
    Ok(r.max_rel_err)
}

fn unit_activations(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = Tensor::<f64>::randn(vec![5, 4], 1.0, rng);
    let w = Tensor::<f64>::randn(vec![4, 4], 0.7, rng);
    let b = Tensor::<f64>::randn(vec![4], 0.3, rng);
    let r = grad_check(&[w, b], |tape, ids| {
        let xi = tape.constant(x.clone());
        let h = tape.linear(xi, ids[0], ids[1])?;
        let h = tape.activation(ActKind::Relu, h);
        let h = tape.activation(ActKind::LeakyRelu, h);
        let h = tape.activation(ActKind::Sigmoid, h);
        Ok(tape.sum_all(h))
    })?;
    Ok(r.max_rel_err)
}

fn unit_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = Tensor::<f64>::randn(vec![4, 5], 1.0, rng);
    let w = Tensor::<f64>::randn(vec![5, 5], 0.7, rng);
    let b = Tensor::<f64>::randn(vec![5], 0.3, rng);
    let labels = [0u32, 3, 1, 4];
    let r = grad_check(&[w, b], move |tape, ids| {
        let xi = tape.constant(x.clone());
        let h = tape.linear(xi, ids[0], ids[1])?;
        let s = tape.softmax_rows(h)?;
        let sum = tape.sum_all(s);
        let ce = tape.cross_entropy(h, &labels)?;
        tape.mean_scalars(&[sum, ce])
    })?;
    Ok(r.max_rel_err)
}

fn unit_segmented_max(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = Tensor::<f64>::randn(vec![10, 3], 1.0, rng);
    let w = Tensor::<f64>::randn(vec![3, 3], 0.7, rng);
    let b = Tensor::<f64>::randn(vec![3], 0.3, rng);
    let seg: Vec<u32> = (0..10).map(|i| (i % 3) as u32).collect();
    let r = grad_check(&[w, b], move |tape, ids| {
        let xi = tape.constant(x.clone());
        let h = tape.linear(xi, ids[0], ids[1])?;
        let m = tape.segmented_max(h, &seg, 4)?;
        Ok(tape.sum_all(m))
    })?;
    Ok(r.max_rel_err)
}

fn unit_projection(method: ProjectionMethod, rng: &mut ChaCha8Rng) -> Result<f64> {
    let pc = random_cloud(14, 3, rng);
    let gm = compute_grid_mapping(&pc, Axis::Z, 4)?;
    let aug = augment_point_features(&pc, &gm)?;
    let w = Tensor::<f64>::randn(vec![8, 4], 0.7, rng);
    let b = Tensor::<f64>::randn(vec![4], 0.3, rng);
    let k = Tensor::<f64>::randn(vec![4, 4, 3, 3], 0.4, rng);
    let kb = Tensor::<f64>::randn(vec![4], 0.2, rng);
    let r = grad_check(&[w, b, k, kb], move |tape, ids| {
        let a = tape.constant(aug.clone());
        let f = tape.linear(a, ids[0], ids[1])?;
        let f = tape.activation(ActKind::Relu, f);
        let cells = match method {
            ProjectionMethod::Pointnet => tape.segmented_max(f, &gm.cell_of, gm.cells())?,
            m => project_on_tape(tape, f, &gm, m, None, Mode::Train)?,
        };
        let planar = tape.hwc_to_chw(cells, 4, 4)?;
        let y = tape.conv2d(planar, ids[2], ids[3])?;
        let back = tape.chw_to_hwc(y)?;
        let out = backproject_on_tape(tape, back, &gm, BackprojectionMode::DistanceWeighted)?;
        Ok(tape.sum_all(out))
    })?;
    Ok(r.max_rel_err)
}

fn unit_conv_variant(variant: ConvVariant, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut p = SeResBlockParams::<f64>::new(4, rng)?;
    jitter_biases(&mut p, rng);
    let input = Tensor::<f64>::randn(vec![16, 4], 1.0, rng);
    let r = grad_check_model(&mut p, "blk", move |p, tape| {
        let cells = tape.constant(input.clone());
        let out = p.forward(tape, "blk", cells, 4, 4, variant, Mode::Train)?;
        Ok(tape.sum_all(out))
    })?;
    Ok(r.max_rel_err)
}

fn unit_fusion(kind: FusionKind, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut p = FusionParams::<f64>::new(kind, true, 2, 3, 6, rng)?;
    jitter_biases(&mut p, rng);
    let point = Tensor::<f64>::randn(vec![8, 3], 1.0, rng);
    let b1 = Tensor::<f64>::randn(vec![8, 3], 1.0, rng);
    let b2 = Tensor::<f64>::randn(vec![8, 3], 1.0, rng);
    let coords = Tensor::<f64>::randn(vec![8, 3], 1.0, rng);
    let r = grad_check_model(&mut p, "fuse", move |p, tape| {
        let pi = tape.constant(point.clone());
        let i1 = tape.constant(b1.clone());
        let i2 = tape.constant(b2.clone());
        let ci = tape.constant(coords.clone());
        let out = p.forward(
            tape,
            "fuse",
            FusionInputs {
                point: Some(pi),
                branches: &[i1, i2],
                coords: Some(ci),
            },
            Mode::Train,
        )?;
        Ok(tape.sum_all(out.out))
    })?;
    Ok(r.max_rel_err)
}

fn unit_ppconv(kind: FusionKind, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = PPConvConfig {
        c_in: 3,
        c_out: 8,
        axes: vec![Axis::Z],
        resolution: 4,
        projection: ProjectionMethod::Pointnet,
        backprojection: BackprojectionMode::DistanceWeighted,
        conv_variant: ConvVariant::ResidualSe,
        fusion: kind,
        include_point_branch: true,
    };
    let mut layer = PPConv::new(cfg, rng)?;
    jitter_biases(&mut layer, rng);
    let pc = random_cloud(10, 3, rng);
    let r = grad_check_model(&mut layer, "pp", move |layer, tape| {
        let f = tape.constant(pc.features.clone());
        let out = layer.forward(tape, "pp", &pc.coords, f, Mode::Train)?;
        Ok(tape.sum_all(out))
    })?;
    Ok(r.max_rel_err)
}

fn unit_full_network(rng: &mut ChaCha8Rng) -> Result<f64> {
    let spec = ModelSpec {
        network: NetworkSpec {
            input_channels: 3,
            class_count: 3,
            sa: vec![SaSpec {
                ppconv: Some(PpLayersSpec {
                    channels: 8,
                    layers: 1,
                    resolution: 4,
                }),
                sample: 12,
                radius: 0.5,
                nsample: 4,
                mlp: vec![8],
            }],
            fp: vec![FpSpec {
                mlp: vec![8],
                ppconv: Some(PpLayersSpec {
                    channels: 8,
                    layers: 1,
                    resolution: 4,
                }),
            }],
            fp_ppconv_first: false,
        },
        ppconv: PPConvTemplate {
            axes: vec![Axis::Z],
            ..PPConvTemplate::default()
        },
    };
    let mut net: Network<f64> = build_network(&spec, rng.gen())?;
    jitter_biases(&mut net, rng);
    let pc = random_cloud(24, 3, rng);
    let labels: Vec<u32> = (0..24).map(|_| rng.gen_range(0..3)).collect();
    let r = grad_check_model(&mut net, "net", move |net, tape| {
        let f = tape.constant(pc.features.clone());
        let logits = net.forward(tape, &pc.coords, f, Mode::Train, 0)?;
        tape.cross_entropy(logits, &labels)
    })?;
    Ok(r.max_rel_err)
}

fn unit_mutation(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = Tensor::<f64>::randn(vec![3, 3], 0.7, rng);
    let x = Tensor::<f64>::randn(vec![4, 3], 1.0, rng);
    let r = grad_check(&[w], move |tape, ids| {
        let bad = tape.debug_bad_identity(ids[0]);
        let xi = tape.constant(x.clone());
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.linear(xi, bad, b)?;
        let y = tape.activation(ActKind::Sigmoid, y);
        Ok(tape.sum_all(y))
    })?;
    Ok(r.max_rel_err)
}

type UnitFn = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn units() -> Vec<(String, f64, UnitFn)> {
    let mut list: Vec<(String, f64, UnitFn)> = vec![
        ("kernel_linear".into(), UNIT_THRESHOLD, Box::new(unit_kernel_linear)),
        ("kernel_conv2d".into(), UNIT_THRESHOLD, Box::new(unit_kernel_conv2d)),
        (
            "kernel_batchnorm_point".into(),
            UNIT_THRESHOLD,
            Box::new(|rng| unit_batchnorm(BnLayout::ChannelsLast, rng)),
        ),
        (
            "kernel_batchnorm_planar".into(),
            UNIT_THRESHOLD,
            Box::new(|rng| unit_batchnorm(BnLayout::ChannelsFirst, rng)),
        ),
        ("kernel_activations".into(), UNIT_THRESHOLD, Box::new(unit_activations)),
        ("kernel_softmax_rows".into(), UNIT_THRESHOLD, Box::new(unit_softmax)),
        (
            "kernel_segmented_max".into(),
            UNIT_THRESHOLD,
            Box::new(unit_segmented_max),
        ),
    ];
    for method in [
        ProjectionMethod::Average,
        ProjectionMethod::Bilinear,
        ProjectionMethod::Pointnet,
    ] {
        list.push((
            format!("projection_{}", method_name(method)),
            UNIT_THRESHOLD,
            Box::new(move |rng: &mut ChaCha8Rng| unit_projection(method, rng)),
        ));
    }
    for variant in [
        ConvVariant::Plain,
        ConvVariant::Residual,
        ConvVariant::ResidualSe,
    ] {
        list.push((
            format!("conv_variant_{}", variant_name(variant)),
            UNIT_THRESHOLD,
            Box::new(move |rng: &mut ChaCha8Rng| unit_conv_variant(variant, rng)),
        ));
    }
    for kind in [FusionKind::Concat, FusionKind::Iwf, FusionKind::Caf] {
        list.push((
            format!("fusion_{}", fusion_name(kind)),
            UNIT_THRESHOLD,
            Box::new(move |rng: &mut ChaCha8Rng| unit_fusion(kind, rng)),
        ));
    }
    for kind in [FusionKind::Concat, FusionKind::Iwf, FusionKind::Caf] {
        list.push((
            format!("ppconv_{}", fusion_name(kind)),
            UNIT_THRESHOLD,
            Box::new(move |rng: &mut ChaCha8Rng| unit_ppconv(kind, rng)),
        ));
    }
    list.push((
        "full_network".into(),
        NETWORK_THRESHOLD,
        Box::new(unit_full_network),
    ));
    list
}

pub fn run_gradcheck(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for (ui, (unit, threshold, f)) in units().into_iter().enumerate() {
        let mut best = f64::INFINITY;
        for attempt in 0..OPERATING_POINTS {
            let mut rng = derive_rng(seed, &[0x67AD, ui as u64, attempt]);
            best = best.min(f(&mut rng)?);
            if best < threshold {
                break;
            }
        }
        rows.push(GradCheckRow {
            unit,
            max_rel_err: best,
            threshold,
            pass: best < threshold,
        });
    }

    // Self test: the deliberately wrong backward rule must fail at every
    // operating point (its error is systematic, not a kink artifact).
    let mut worst_floor = f64::INFINITY;
    for attempt in 0..OPERATING_POINTS {
        let mut rng = derive_rng(seed, &[0x67AD, 0xBAD, attempt]);
        worst_floor = worst_floor.min(unit_mutation(&mut rng)?);
    }
    rows.push(GradCheckRow {
        unit: "checker_detects_mutation".into(),
        max_rel_err: worst_floor,
        threshold: MUTATION_FLOOR,
        pass: worst_floor > MUTATION_FLOOR,
    });
    Ok(rows)
}

fn method_name(m: ProjectionMethod) -> &'static str {
    match m {
        ProjectionMethod::Average => "average",
        ProjectionMethod::Bilinear => "bilinear",
        ProjectionMethod::Pointnet => "pointnet",
    }
}

fn variant_name(v: ConvVariant) -> &'static str {
    match v {
        ConvVariant::Plain => "plain",
        ConvVariant::Residual => "residual",
        ConvVariant::ResidualSe => "residual_se",
    }
}

pub(crate) fn fusion_name(k: FusionKind) -> &'static str {
    match k {
        FusionKind::Concat => "concat",
        FusionKind::Iwf => "iwf",
        FusionKind::Caf => "caf",
    }
}

pub fn gradcheck_csv(rows: &[GradCheckRow]) -> String {
    let mut out = String::from("unit,max_rel_err,threshold,pass\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.3e},{:.0e},{}",
            r.unit, r.max_rel_err, r.threshold, r.pass
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_unit_is_reported_once() {
        let rows = run_gradcheck(5).unwrap();
        let expected = [
            "kernel_linear",
            "kernel_conv2d",
            "kernel_batchnorm_point",
            "kernel_batchnorm_planar",
            "kernel_activations",
            "kernel_softmax_rows",
            "kernel_segmented_max",
            "projection_average",
            "projection_bilinear",
            "projection_pointnet",
            "conv_variant_plain",
            "conv_variant_residual",
            "conv_variant_residual_se",
            "fusion_concat",
            "fusion_iwf",
            "fusion_caf",
            "ppconv_concat",
            "ppconv_iwf",
            "ppconv_caf",
            "full_network",
            "checker_detects_mutation",
        ];
        assert_eq!(rows.len(), expected.len());
        for (row, want) in rows.iter().zip(expected) {
            assert_eq!(row.unit, want);
        }
    }

    #[test]
    fn mutation_fixture_fails_at_all_operating_points() {
        let rows = run_gradcheck(5).unwrap();
        let mutation = rows
            .iter()
            .find(|r| r.unit == "checker_detects_mutation")
            .unwrap();
        assert!(mutation.pass, "err {}", mutation.max_rel_err);
        assert!(mutation.max_rel_err > MUTATION_FLOOR);
    }
}
