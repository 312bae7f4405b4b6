//! The PPConv module: a per-point MLP branch plus one projection branch per
//! configured axis (project, 2D conv block, backproject), merged by the
//! configured fusion strategy. Coordinates pass through unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv2dblock::{ConvVariant, SeResBlockParams};
use crate::error::{Error, Result};
use crate::fusion::{FusionInputs, FusionKind, FusionParams};
use crate::nn::{Mlp, ParamKind, Parameters};
use crate::numkernel::{Mode, Scalar, Tape, Tensor, ValId};
use crate::pointgrid::{grid_mapping_for_coords, relative_features_for_coords, Axis, PointCloud};
use crate::projection::{backproject_on_tape, project_on_tape, BackprojectionMode, ProjectionMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PPConvConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Projection axes; one branch per axis. May be empty only when the
    /// point branch is enabled (the branch-ablation configuration).
    pub axes: Vec<Axis>,
    pub resolution: usize,
    pub projection: ProjectionMethod,
    pub backprojection: BackprojectionMode,
    pub conv_variant: ConvVariant,
    pub fusion: FusionKind,
    pub include_point_branch: bool,
}

impl PPConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.c_out % 2 != 0 {
            return Err(Error::Config(format!(
                "channel counts c_in={} c_out={} (c_out must be even and positive)",
                self.c_in, self.c_out
            )));
        }
        if self.resolution == 0 {
            return Err(Error::Config("grid resolution must be >= 1".into()));
        }
        if self.axes.len() > 3 {
            return Err(Error::Config("at most three projection axes".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if self.axes[..i].contains(a) {
                return Err(Error::Config(format!("duplicate projection axis {a:?}")));
            }
        }
        if self.axes.is_empty() && !self.include_point_branch {
            return Err(Error::Config(
                "need at least one branch: projection axes or the point branch".into(),
            ));
        }
        Ok(())
    }

    /// Branch feature width: `C_point = C_proj = C_conv = C_out / 2`.
    pub fn c_half(&self) -> usize {
        self.c_out / 2
    }

    pub fn branch_count(&self) -> usize {
        self.axes.len() + usize::from(self.include_point_branch)
    }
}

/// Parameters of one projection branch.
#[derive(Debug, Clone)]
pub struct AxisBranch<S> {
    pub axis: Axis,
    /// Per-point feature transform into the branch width. For PointNet
    /// projection this is the MLP over `[f | f_aug]` inside the projection;
    /// for average/bilinear it lifts raw features to `C_proj` before the
    /// scatter so the conv block sees its configured channel count.
    pub feat_mlp: Mlp<S>,
    pub block: SeResBlockParams<S>,
}

#[derive(Debug, Clone)]
pub struct PPConvParams<S> {
    pub point: Option<Mlp<S>>,
    pub branches: Vec<AxisBranch<S>>,
    pub fusion: FusionParams<S>,
}

/// One PPConv layer: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct PPConv<S> {
    pub cfg: PPConvConfig,
    pub params: PPConvParams<S>,
}

impl<S: Scalar> PPConv<S> {
    pub fn new(cfg: PPConvConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c_half = cfg.c_half();
        let point = cfg
            .include_point_branch
            .then(|| Mlp::new(cfg.c_in, c_half, rng));
        let branches = cfg
            .axes
            .iter()
            .map(|&axis| {
                let mlp_in = match cfg.projection {
                    ProjectionMethod::Pointnet => cfg.c_in + 5,
                    _ => cfg.c_in,
                };
                Ok(AxisBranch {
                    axis,
                    feat_mlp: Mlp::new(mlp_in, c_half, rng),
                    block: SeResBlockParams::new(c_half, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = FusionParams::new(
            cfg.fusion,
            cfg.include_point_branch,
            cfg.axes.len(),
            c_half,
            cfg.c_out,
            rng,
        )?;
        Ok(PPConv {
            cfg,
            params: PPConvParams {
                point,
                branches,
                fusion,
            },
        })
    }

    /// Run the module over tape features. `coords` drive the grid mappings
    /// (and CAF weights) but are not differentiated through.
    pub fn forward(
        &mut self,
        tape: &mut Tape<S>,
        name: &str,
        coords: &[[S; 3]],
        features: ValId,
        mode: Mode,
    ) -> Result<ValId> {
        if tape.value(features).rows() != coords.len() {
            return Err(Error::Consistency(format!(
                "{} coordinate rows vs {} feature rows",
                coords.len(),
                tape.value(features).rows()
            )));
        }
        if tape.value(features).cols() != self.cfg.c_in {
            return Err(Error::Dimension(format!(
                "ppconv configured for c_in={}, features have {}",
                self.cfg.c_in,
                tape.value(features).cols()
            )));
        }

        let point_out = match &mut self.params.point {
            Some(mlp) => Some(
                mlp.forward(tape, &format!("{name}.point"), features, mode)
                    .map_err(|e| e.in_stage("point branch"))?,
            ),
            None => None,
        };

        let mut branch_outs = Vec::with_capacity(self.params.branches.len());
        let r = self.cfg.resolution;
        for branch in &mut self.params.branches {
            let stage = format!("projection branch {}", branch.axis.name());
            let bname = format!("{name}.proj_{}", branch.axis.name());
            let gm = grid_mapping_for_coords(coords, branch.axis, r)
                .map_err(|e| e.in_stage(stage.clone()))?;

            let cells = match self.cfg.projection {
                ProjectionMethod::Pointnet => {
                    let rel = relative_features_for_coords(coords, &gm)
                        .map_err(|e| e.in_stage(stage.clone()))?;
                    let rel = tape.constant(rel);
                    let aug = tape.concat_cols(&[features, rel])?;
                    project_on_tape(
                        tape,
                        aug,
                        &gm,
                        ProjectionMethod::Pointnet,
                        Some((&mut branch.feat_mlp, &format!("{bname}.mlp"))),
                        mode,
                    )
                }
                method => {
                    let lifted = branch
                        .feat_mlp
                        .forward(tape, &format!("{bname}.mlp"), features, mode)?;
                    project_on_tape(tape, lifted, &gm, method, None, mode)
                }
            }
            .map_err(|e| e.in_stage(stage.clone()))?;

            let conved = branch
                .block
                .forward(
                    tape,
                    &format!("{bname}.block"),
                    cells,
                    r,
                    r,
                    self.cfg.conv_variant,
                    mode,
                )
                .map_err(|e| e.in_stage(stage.clone()))?;

            let back = backproject_on_tape(tape, conved, &gm, self.cfg.backprojection)
                .map_err(|e| e.in_stage(stage.clone()))?;
            branch_outs.push(back);
        }

        let coords_id = match self.cfg.fusion {
            FusionKind::Caf => {
                let mut t = Tensor::zeros(vec![coords.len(), 3]);
                for (i, c) in coords.iter().enumerate() {
                    t.data_mut()[i * 3..i * 3 + 3].copy_from_slice(c);
                }
                Some(tape.constant(t))
            }
            _ => None,
        };
        let fused = self
            .params
            .fusion
            .forward(
                tape,
                &format!("{name}.fusion"),
                FusionInputs {
                    point: point_out,
                    branches: &branch_outs,
                    coords: coords_id,
                },
                mode,
            )
            .map_err(|e| e.in_stage("fusion"))?;
        Ok(fused.out)
    }
}

impl<S: Scalar> Parameters<S> for PPConv<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>)) {
        if let Some(p) = &self.params.point {
            p.visit(&format!("{prefix}.point"), f);
        }
        for b in &self.params.branches {
            let bname = format!("{prefix}.proj_{}", b.axis.name());
            b.feat_mlp.visit(&format!("{bname}.mlp"), f);
            b.block.visit(&format!("{bname}.block"), f);
        }
        self.params.fusion.visit(&format!("{prefix}.fusion"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<S>)) {
        if let Some(p) = &mut self.params.point {
            p.visit_mut(&format!("{prefix}.point"), f);
        }
        for b in &mut self.params.branches {
            let bname = format!("{prefix}.proj_{}", b.axis.name());
            b.feat_mlp.visit_mut(&format!("{bname}.mlp"), f);
            b.block.visit_mut(&format!("{bname}.block"), f);
        }
        self.params.fusion.visit_mut(&format!("{prefix}.fusion"), f);
    }
}

/// Standalone module application: same coordinates out, `N x C_out` features.
pub fn ppconv_forward<S: Scalar>(
    pc: &PointCloud<S>,
    layer: &mut PPConv<S>,
    mode: Mode,
) -> Result<PointCloud<S>> {
    let mut tape = Tape::new();
    let features = tape.constant(pc.features.clone());
    let out = layer.forward(&mut tape, "ppconv", &pc.coords, features, mode)?;
    PointCloud::new(
        pc.coords.clone(),
        tape.value(out).clone(),
        pc.labels.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{grad_check_model, ActKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn base_cfg() -> PPConvConfig {
        PPConvConfig {
            c_in: 3,
            c_out: 8,
            axes: vec![Axis::Z],
            resolution: 4,
            projection: ProjectionMethod::Pointnet,
            backprojection: BackprojectionMode::DistanceWeighted,
            conv_variant: ConvVariant::ResidualSe,
            fusion: FusionKind::Concat,
            include_point_branch: true,
        }
    }

    fn random_cloud(n: usize, c: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        PointCloud::new(coords, Tensor::randn(vec![n, c], 1.0, &mut rng), None).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = base_cfg();
        cfg.c_out = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.axes = vec![Axis::Z, Axis::Z];
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.axes.clear();
        cfg.include_point_branch = false;
        assert!(cfg.validate().is_err());
        cfg.include_point_branch = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn point_branch_examples() {
        use crate::numkernel::kernels;
        let mut rng = ChaCha8Rng::seed_from_u64(40);

        // Identity-equivalent parameters on normalized input: identity
        // weights, eval-mode BN with identity stats, so output = ReLU(input)
        // up to the BN epsilon shrink.
        let mut branch = crate::nn::Mlp::<f64>::new(4, 4, &mut rng);
        branch.linear = crate::nn::Linear::identity(4);
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0, -0.25]]).unwrap();
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let out = branch.forward(&mut tape, "pb", xi, Mode::Eval).unwrap();
        let want = kernels::activation(crate::numkernel::ActKind::Relu, &x);
        assert!(tape.value(out).max_abs_diff(&want) < 1e-4);

        // All-zero input with zero bias stays all-zero (beta is zero too).
        let mut branch = crate::nn::Mlp::<f64>::new(3, 5, &mut rng);
        branch.linear.b = Tensor::zeros(vec![5]);
        let mut tape = Tape::new();
        let xi = tape.constant(Tensor::zeros(vec![4, 3]));
        let out = branch.forward(&mut tape, "pb", xi, Mode::Eval).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        // Random input equals the manual linear + BN + ReLU composition.
        let mut branch = crate::nn::Mlp::<f64>::new(8, 6, &mut rng);
        let x = Tensor::<f64>::randn(vec![16, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let out = branch.forward(&mut tape, "pb", xi, Mode::Train).unwrap();
        let h = kernels::linear(&x, &branch.linear.w, &branch.linear.b).unwrap();
        let mut stats = crate::numkernel::BnStats::identity(6);
        let h = kernels::batchnorm(
            &h,
            &branch.bn.gamma,
            &branch.bn.beta,
            &mut stats,
            crate::numkernel::BnLayout::ChannelsLast,
            Mode::Train,
        )
        .unwrap();
        let want = kernels::activation(crate::numkernel::ActKind::Relu, &h);
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn output_preserves_coords_and_point_count() {
        let pc = random_cloud(20, 3, 1);
        let mut layer = PPConv::new(base_cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let out = ppconv_forward(&pc, &mut layer, Mode::Eval).unwrap();
        assert_eq!(out.coords, pc.coords);
        assert_eq!(out.features.shape(), &[20, 8]);
    }

    #[test]
    fn single_point_cloud_is_well_defined() {
        let pc = random_cloud(1, 3, 3);
        for fusion in [FusionKind::Concat, FusionKind::Iwf, FusionKind::Caf] {
            let mut cfg = base_cfg();
            cfg.fusion = fusion;
            cfg.axes = vec![Axis::X, Axis::Y, Axis::Z];
            let mut layer = PPConv::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let out = ppconv_forward(&pc, &mut layer, Mode::Eval).unwrap();
            assert_eq!(out.features.rows(), 1);
            out.features.validate().unwrap();
        }
    }

    #[test]
    fn no_point_branch_reduces_to_summed_projection_mlp() {
        // Table-6-style configuration: three projection branches, no point
        // branch; fusion is a single-layer MLP on the summed branch features.
        let mut cfg = base_cfg();
        cfg.include_point_branch = false;
        cfg.axes = vec![Axis::X, Axis::Y, Axis::Z];
        let mut layer = PPConv::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(layer.params.point.is_none());
        match &layer.params.fusion {
            FusionParams::Concat { mlp } => {
                assert_eq!(mlp.linear.in_features(), 4); // c_half, branch sum only
                assert_eq!(mlp.linear.out_features(), 8);
            }
            _ => panic!("expected concat fusion"),
        }
        let pc = random_cloud(16, 3, 6);
        let out = ppconv_forward(&pc, &mut layer, Mode::Eval).unwrap();
        assert_eq!(out.features.shape(), &[16, 8]);
    }

    #[test]
    fn axis_order_does_not_change_concat_output() {
        let mut cfg = base_cfg();
        cfg.axes = vec![Axis::X, Axis::Z];
        let layer = PPConv::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut swapped = layer.clone();
        swapped.cfg.axes.swap(0, 1);
        swapped.params.branches.swap(0, 1);

        let pc = random_cloud(24, 3, 8);
        let a = ppconv_forward(&pc, &mut layer.clone(), Mode::Eval).unwrap();
        let b = ppconv_forward(&pc, &mut swapped, Mode::Eval).unwrap();
        assert_eq!(a.features.data(), b.features.data());
    }

    #[test]
    fn zeroed_conv_residual_matches_hand_composition() {
        // With conv kernels and BN gammas zero, the residual block becomes
        // LReLU(identity), so the branch is backproject(LReLU(project(...))).
        let mut cfg = base_cfg();
        cfg.fusion = FusionKind::Concat;
        cfg.conv_variant = ConvVariant::Residual;
        let mut layer = PPConv::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for b in &mut layer.params.branches {
            b.block.conv1.k = Tensor::zeros(vec![4, 4, 3, 3]);
            b.block.conv2.k = Tensor::zeros(vec![4, 4, 3, 3]);
            b.block.bn1.gamma = Tensor::zeros(vec![4]);
            b.block.bn2.gamma = Tensor::zeros(vec![4]);
        }
        let pc = random_cloud(15, 3, 10);
        let out = ppconv_forward(&pc, &mut layer.clone(), Mode::Eval).unwrap();

        // Hand-composed pipeline using the same parameters.
        let mut tape = Tape::new();
        let feats = tape.constant(pc.features.clone());
        let gm = grid_mapping_for_coords(&pc.coords, Axis::Z, 4).unwrap();
        let rel = tape.constant(relative_features_for_coords(&pc.coords, &gm).unwrap());
        let aug = tape.concat_cols(&[feats, rel]).unwrap();
        let mut branch = layer.params.branches[0].clone();
        let cells = project_on_tape(
            &mut tape,
            aug,
            &gm,
            ProjectionMethod::Pointnet,
            Some((&mut branch.feat_mlp, "m")),
            Mode::Eval,
        )
        .unwrap();
        let lrelu = tape.activation(ActKind::LeakyRelu, cells);
        let back = backproject_on_tape(&mut tape, lrelu, &gm, BackprojectionMode::DistanceWeighted)
            .unwrap();
        let point = layer
            .params
            .point
            .clone()
            .unwrap()
            .forward(&mut tape, "p", feats, Mode::Eval)
            .unwrap();
        let cat = tape.concat_cols(&[point, back]).unwrap();
        let FusionParams::Concat { mlp } = &mut layer.params.fusion else {
            panic!()
        };
        let want = mlp.forward(&mut tape, "f", cat, Mode::Eval).unwrap();
        assert!(out
            .features
            .max_abs_diff(tape.value(want))
            < 1e-12);
    }

    #[test]
    fn permutation_equivariance_all_fusions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pc = random_cloud(64, 3, 12);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..64).collect();
            for i in (1..64).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };
        let permuted = PointCloud::new(
            perm.iter().map(|&i| pc.coords[i]).collect(),
            Tensor::from_rows(
                &perm
                    .iter()
                    .map(|&i| pc.features.row(i).to_vec())
                    .collect::<Vec<_>>(),
            )
            .unwrap(),
            None,
        )
        .unwrap();

        for fusion in [FusionKind::Concat, FusionKind::Iwf, FusionKind::Caf] {
            let mut cfg = base_cfg();
            cfg.fusion = fusion;
            cfg.axes = vec![Axis::X, Axis::Z];
            let layer = PPConv::new(cfg, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
            let a = ppconv_forward(&pc, &mut layer.clone(), Mode::Eval).unwrap();
            let b = ppconv_forward(&permuted, &mut layer.clone(), Mode::Eval).unwrap();
            let mut worst = 0.0f64;
            for (pi, &src) in perm.iter().enumerate() {
                for c in 0..8 {
                    worst = worst.max((a.features.row(src)[c] - b.features.row(pi)[c]).abs());
                }
            }
            assert!(worst < 1e-9, "{fusion:?}: {worst}");
        }
    }

    #[test]
    fn gradients_pass_for_all_fusions() {
        for (seed, fusion) in [
            (70, FusionKind::Concat),
            (71, FusionKind::Iwf),
            (72, FusionKind::Caf),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = base_cfg();
            cfg.fusion = fusion;
            let mut layer = PPConv::new(cfg, &mut rng).unwrap();
            crate::nn::jitter_biases(&mut layer, &mut rng);
            let pc = random_cloud(10, 3, seed + 100);
            let report = grad_check_model(&mut layer, "pp", move |layer, tape| {
                let f = tape.constant(pc.features.clone());
                let out = layer.forward(tape, "pp", &pc.coords, f, Mode::Train)?;
                Ok(tape.sum_all(out))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{fusion:?}: {}", report.max_rel_err);
        }
    }
}
