//! Merging the backprojected branch features and the point-branch feature
//! into one `N x C_out` output: concat-MLP by default, or the two learned
//! attention-weighted schemes (importance-weighted and context-aware).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamKind, Parameters};
use crate::numkernel::{ActKind, Mode, Scalar, Tape, Tensor, ValId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Sum the branch features, concatenate with the point feature, one
    /// linear+BN+ReLU layer to `C_out`.
    Concat,
    /// Importance-weighted fusion: per-feature gate matrices summed and
    /// row-softmaxed into fusion weights.
    Iwf,
    /// Context-aware fusion: weights come from the point coordinates through
    /// a mini-PointNet with a global max-pool.
    Caf,
}

/// Hidden widths of the CAF coordinate network.
pub const CAF_H1: usize = 32;
pub const CAF_H2: usize = 64;
pub const CAF_G1: usize = 64;

/// Tape-level inputs to a fusion op. Features are ordered `[point?, branches...]`
/// and every present tensor is `N x C_half`.
pub struct FusionInputs<'a> {
    pub point: Option<ValId>,
    pub branches: &'a [ValId],
    /// `N x 3` coordinates; required by CAF only.
    pub coords: Option<ValId>,
}

pub struct FusionOutput {
    pub out: ValId,
    /// Row-stochastic `N x B` weight matrix for IWF / CAF; `None` for concat.
    pub weights: Option<ValId>,
}

#[derive(Debug, Clone)]
pub enum FusionParams<S> {
    Concat {
        mlp: Mlp<S>,
    },
    Iwf {
        gates: Vec<Linear<S>>,
        lift: Linear<S>,
    },
    Caf {
        h1: Linear<S>,
        h2: Linear<S>,
        g1: Linear<S>,
        g2: Linear<S>,
        lift: Linear<S>,
    },
}

impl<S: Scalar> FusionParams<S> {
    /// Builds fusion parameters for `n_branches` projection branches plus an
    /// optional point branch, all of width `c_half`; output is `N x c_out`.
    pub fn new(
        kind: FusionKind,
        has_point: bool,
        n_branches: usize,
        c_half: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let feature_count = n_branches + usize::from(has_point);
        if feature_count == 0 {
            return Err(Error::Config("fusion needs at least one feature".into()));
        }
        Ok(match kind {
            FusionKind::Concat => {
                // Branch features are summed first, so the concat width is one
                // slot for the point feature and one for the branch sum.
                let parts = usize::from(has_point) + usize::from(n_branches > 0);
                FusionParams::Concat {
                    mlp: Mlp::new(parts * c_half, c_out, rng),
                }
            }
            FusionKind::Iwf => FusionParams::Iwf {
                gates: (0..feature_count)
                    .map(|_| Linear::new(c_half, feature_count, rng))
                    .collect(),
                lift: Linear::new(c_half, c_out, rng),
            },
            FusionKind::Caf => FusionParams::Caf {
                h1: Linear::new(3, CAF_H1, rng),
                h2: Linear::new(CAF_H1, CAF_H2, rng),
                g1: Linear::new(2 * CAF_H2, CAF_G1, rng),
                g2: Linear::new(CAF_G1, feature_count, rng),
                lift: Linear::new(c_half, c_out, rng),
            },
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionParams::Concat { .. } => FusionKind::Concat,
            FusionParams::Iwf { .. } => FusionKind::Iwf,
            FusionParams::Caf { .. } => FusionKind::Caf,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<S>,
        name: &str,
        inputs: FusionInputs<'_>,
        mode: Mode,
    ) -> Result<FusionOutput> {
        let mut feats: Vec<ValId> = Vec::new();
        if let Some(p) = inputs.point {
            feats.push(p);
        }
        feats.extend_from_slice(inputs.branches);
        if feats.is_empty() {
            return Err(Error::Config("fusion called with no features".into()));
        }
        let c_half = tape.value(feats[0]).cols();
        let n = tape.value(feats[0]).rows();
        for &f in &feats {
            if tape.value(f).rows() != n || tape.value(f).cols() != c_half {
                return Err(Error::Config(format!(
                    "fusion features must share N x C; got {:?} vs {} x {}",
                    tape.value(f).shape(),
                    n,
                    c_half
                )));
            }
        }

        match self {
            FusionParams::Concat { mlp } => {
                let branch_sum = match inputs.branches.len() {
                    0 => None,
                    1 => Some(inputs.branches[0]),
                    _ => {
                        let mut acc = inputs.branches[0];
                        for &b in &inputs.branches[1..] {
                            acc = tape.add(acc, b)?;
                        }
                        Some(acc)
                    }
                };
                let cat = match (inputs.point, branch_sum) {
                    (Some(p), Some(s)) => tape.concat_cols(&[p, s])?,
                    (Some(p), None) => p,
                    (None, Some(s)) => s,
                    (None, None) => unreachable!(),
                };
                if tape.value(cat).cols() != mlp.linear.in_features() {
                    return Err(Error::Config(format!(
                        "concat fusion expects width {}, got {}",
                        mlp.linear.in_features(),
                        tape.value(cat).cols()
                    )));
                }
                let out = mlp.forward(tape, &format!("{name}.mlp"), cat, mode)?;
                Ok(FusionOutput { out, weights: None })
            }
            FusionParams::Iwf { gates, lift } => {
                if gates.len() != feats.len() {
                    return Err(Error::Config(format!(
                        "IWF built for {} features, got {}",
                        gates.len(),
                        feats.len()
                    )));
                }
                let mut summed: Option<ValId> = None;
                for (bi, (&f, gate)) in feats.iter().zip(gates.iter()).enumerate() {
                    let logits = gate.forward(tape, &format!("{name}.gate{bi}"), f)?;
                    let gated = tape.activation(ActKind::Sigmoid, logits);
                    summed = Some(match summed {
                        None => gated,
                        Some(acc) => tape.add(acc, gated)?,
                    });
                }
                let weights = tape.softmax_rows(summed.expect("at least one feature"))?;
                let fused = tape.weighted_sum_rows(weights, &feats)?;
                let out = lift.forward(tape, &format!("{name}.lift"), fused)?;
                Ok(FusionOutput {
                    out,
                    weights: Some(weights),
                })
            }
            FusionParams::Caf { h1, h2, g1, g2, lift } => {
                let coords = inputs
                    .coords
                    .ok_or_else(|| Error::Config("CAF requires point coordinates".into()))?;
                if tape.value(coords).rows() != n || tape.value(coords).cols() != 3 {
                    return Err(Error::Config("CAF coords must be N x 3".into()));
                }
                let h = h1.forward(tape, &format!("{name}.h1"), coords)?;
                let h = tape.activation(ActKind::Relu, h);
                let h = h2.forward(tape, &format!("{name}.h2"), h)?;
                let h = tape.activation(ActKind::Relu, h);
                let global = tape.col_max(h)?;
                let global = tape.broadcast_rows(global, n)?;
                let cat = tape.concat_cols(&[h, global])?;
                let z = g1.forward(tape, &format!("{name}.g1"), cat)?;
                let z = tape.activation(ActKind::Relu, z);
                let logits = g2.forward(tape, &format!("{name}.g2"), z)?;
                if tape.value(logits).cols() != feats.len() {
                    return Err(Error::Config(format!(
                        "CAF built for {} features, got {}",
                        tape.value(logits).cols(),
                        feats.len()
                    )));
                }
                let weights = tape.softmax_rows(logits)?;
                let fused = tape.weighted_sum_rows(weights, &feats)?;
                let out = lift.forward(tape, &format!("{name}.lift"), fused)?;
                Ok(FusionOutput {
                    out,
                    weights: Some(weights),
                })
            }
        }
    }
}

impl<S: Scalar> Parameters<S> for FusionParams<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>)) {
        match self {
            FusionParams::Concat { mlp } => mlp.visit(&format!("{prefix}.mlp"), f),
            FusionParams::Iwf { gates, lift } => {
                for (i, g) in gates.iter().enumerate() {
                    g.visit(&format!("{prefix}.gate{i}"), f);
                }
                lift.visit(&format!("{prefix}.lift"), f);
            }
            FusionParams::Caf { h1, h2, g1, g2, lift } => {
                h1.visit(&format!("{prefix}.h1"), f);
                h2.visit(&format!("{prefix}.h2"), f);
                g1.visit(&format!("{prefix}.g1"), f);
                g2.visit(&format!("{prefix}.g2"), f);
                lift.visit(&format!("{prefix}.lift"), f);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<S>)) {
        match self {
            FusionParams::Concat { mlp } => mlp.visit_mut(&format!("{prefix}.mlp"), f),
            FusionParams::Iwf { gates, lift } => {
                for (i, g) in gates.iter_mut().enumerate() {
                    g.visit_mut(&format!("{prefix}.gate{i}"), f);
                }
                lift.visit_mut(&format!("{prefix}.lift"), f);
            }
            FusionParams::Caf { h1, h2, g1, g2, lift } => {
                h1.visit_mut(&format!("{prefix}.h1"), f);
                h2.visit_mut(&format!("{prefix}.h2"), f);
                g1.visit_mut(&format!("{prefix}.g1"), f);
                g2.visit_mut(&format!("{prefix}.g2"), f);
                lift.visit_mut(&format!("{prefix}.lift"), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::grad_check_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn run(
        params: &mut FusionParams<f64>,
        point: Option<&Tensor<f64>>,
        branches: &[Tensor<f64>],
        coords: Option<&Tensor<f64>>,
        mode: Mode,
    ) -> (Tensor<f64>, Option<Tensor<f64>>) {
        let mut tape = Tape::new();
        let point = point.map(|t| tape.constant(t.clone()));
        let branch_ids: Vec<ValId> = branches.iter().map(|t| tape.constant(t.clone())).collect();
        let coords = coords.map(|t| tape.constant(t.clone()));
        let out = params
            .forward(
                &mut tape,
                "fuse",
                FusionInputs {
                    point,
                    branches: &branch_ids,
                    coords,
                },
                mode,
            )
            .unwrap();
        (
            tape.value(out.out).clone(),
            out.weights.map(|w| tape.value(w).clone()),
        )
    }

    #[test]
    fn concat_zero_branch_equals_mlp_of_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = FusionParams::<f64>::new(FusionKind::Concat, true, 1, 3, 6, &mut rng).unwrap();
        let point = randn(vec![5, 3], 2);
        let zero = Tensor::zeros(vec![5, 3]);
        let (out, _) = run(&mut p.clone(), Some(&point), &[zero.clone()], None, Mode::Eval);

        // Oracle: feed the concatenation through the MLP by hand.
        let mut tape = Tape::new();
        let pi = tape.constant(point);
        let zi = tape.constant(zero);
        let cat = tape.concat_cols(&[pi, zi]).unwrap();
        let FusionParams::Concat { mlp } = &mut p else { unreachable!() };
        let want = mlp.forward(&mut tape, "fuse.mlp", cat, Mode::Eval).unwrap();
        assert_eq!(out.data(), tape.value(want).data());
    }

    #[test]
    fn concat_additive_cancellation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FusionParams::<f64>::new(FusionKind::Concat, true, 1, 3, 6, &mut rng).unwrap();
        let point = randn(vec![4, 3], 4);
        let a = randn(vec![4, 3], 5);
        let b = randn(vec![4, 3], 6);
        let mut neg = Tensor::zeros(vec![4, 3]);
        for (o, (&x, &y)) in neg.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
            *o = -x - y;
        }
        let (three, _) = run(
            &mut p.clone(),
            Some(&point),
            &[a.clone(), b.clone(), neg],
            None,
            Mode::Eval,
        );
        let (one, _) = run(
            &mut p.clone(),
            Some(&point),
            &[Tensor::zeros(vec![4, 3])],
            None,
            Mode::Eval,
        );
        assert!(three.max_abs_diff(&one) < 1e-12);
    }

    #[test]
    fn concat_identity_mlp_returns_raw_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = FusionParams::<f64>::new(FusionKind::Concat, true, 1, 2, 4, &mut rng).unwrap();
        let FusionParams::Concat { mlp } = &mut p else { unreachable!() };
        mlp.linear = Linear::identity(4);
        let point = Tensor::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.25]]).unwrap();
        let branch = Tensor::from_rows(&[vec![1.5, 0.75], vec![0.1, 0.9]]).unwrap();
        let (out, _) = run(&mut p, Some(&point), &[branch.clone()], None, Mode::Eval);
        let want = [
            [0.5, 1.0, 1.5, 0.75],
            [2.0, 0.25, 0.1, 0.9],
        ];
        for r in 0..2 {
            for c in 0..4 {
                assert!((out.row(r)[c] - want[r][c]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn iwf_zero_gates_average_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = FusionParams::<f64>::new(FusionKind::Iwf, true, 2, 2, 4, &mut rng).unwrap();
        let FusionParams::Iwf { gates, lift } = &mut p else { unreachable!() };
        for g in gates.iter_mut() {
            g.w = Tensor::zeros(vec![2, 3]);
            g.b = Tensor::zeros(vec![3]);
        }
        let lift_snapshot = lift.clone();
        let point = randn(vec![4, 2], 10);
        let b1 = randn(vec![4, 2], 11);
        let b2 = randn(vec![4, 2], 12);
        let (out, weights) =
            run(&mut p, Some(&point), &[b1.clone(), b2.clone()], None, Mode::Eval);
        let w = weights.unwrap();
        for v in w.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // Output equals the lift of the plain feature average.
        let mut avg = Tensor::zeros(vec![4, 2]);
        for i in 0..8 {
            avg.data_mut()[i] = (point.data()[i] + b1.data()[i] + b2.data()[i]) / 3.0;
        }
        let want = crate::numkernel::kernels::linear(&avg, &lift_snapshot.w, &lift_snapshot.b)
            .unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn weights_one_zero_select_point_feature() {
        // Sigmoid bounds each gate's vote, so parameters alone cannot push
        // the softmax all the way to [1, 0]; pin the weight matrix itself and
        // verify the weighted-sum + lift semantics.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let lift = Linear::<f64>::new(2, 3, &mut rng);
        let point = randn(vec![3, 2], 14);
        let branch = randn(vec![3, 2], 15);

        let mut tape = Tape::new();
        let pi = tape.constant(point.clone());
        let bi = tape.constant(branch);
        let w = tape.constant(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap(),
        );
        let fused = tape.weighted_sum_rows(w, &[pi, bi]).unwrap();
        let out = lift.forward(&mut tape, "lift", fused).unwrap();
        let want = crate::numkernel::kernels::linear(&point, &lift.w, &lift.b).unwrap();
        assert_eq!(tape.value(out).data(), want.data());

        // The saturation ceiling itself: gate biases at +/-40 drive the
        // summed votes to (B, 0), so weights converge to softmax([B, 0]).
        let mut p = FusionParams::<f64>::new(FusionKind::Iwf, true, 1, 2, 3, &mut rng).unwrap();
        let FusionParams::Iwf { gates, .. } = &mut p else { unreachable!() };
        for g in gates.iter_mut() {
            g.w = Tensor::zeros(vec![2, 2]);
            g.b = Tensor::new(vec![2], vec![40.0, -40.0]).unwrap();
        }
        let (_, weights) = run(&mut p, Some(&point), &[randn(vec![3, 2], 16)], None, Mode::Eval);
        let w = weights.unwrap();
        let want0 = (2.0f64).exp() / ((2.0f64).exp() + 1.0);
        for r in 0..3 {
            assert!((w.row(r)[0] - want0).abs() < 1e-9);
        }
    }

    #[test]
    fn iwf_matches_per_point_oracle_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = FusionParams::<f64>::new(FusionKind::Iwf, true, 3, 3, 6, &mut rng).unwrap();
        let point = randn(vec![6, 3], 18);
        let branches = [randn(vec![6, 3], 19), randn(vec![6, 3], 20), randn(vec![6, 3], 21)];
        let lift = match &p {
            FusionParams::Iwf { lift, .. } => lift.clone(),
            _ => unreachable!(),
        };
        let (out, weights) = run(&mut p, Some(&point), &branches, None, Mode::Eval);
        let w = weights.unwrap();
        let feats = [&point, &branches[0], &branches[1], &branches[2]];
        for r in 0..6 {
            let row_sum: f64 = w.row(r).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
            for v in w.row(r) {
                assert!(*v > 0.0 && *v < 1.0);
            }
            // Per-point enumeration oracle for the weighted sum + lift.
            let mut mix = vec![0.0; 3];
            for (b, f) in feats.iter().enumerate() {
                for c in 0..3 {
                    mix[c] += w.row(r)[b] * f.row(r)[c];
                }
            }
            for co in 0..6 {
                let mut want = lift.b.data()[co];
                for c in 0..3 {
                    want += mix[c] * lift.w.data()[c * 6 + co];
                }
                assert!((out.row(r)[co] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn caf_weights_are_a_function_of_coords_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = FusionParams::<f64>::new(FusionKind::Caf, true, 2, 2, 4, &mut rng).unwrap();
        let coords = randn(vec![5, 3], 24);
        let point = randn(vec![5, 2], 25);
        let branches = [randn(vec![5, 2], 26), randn(vec![5, 2], 27)];
        let (_, w1) = run(&mut p, Some(&point), &branches, Some(&coords), Mode::Eval);
        let other = [randn(vec![5, 2], 28), randn(vec![5, 2], 29)];
        let (_, w2) = run(&mut p, Some(&point), &other, Some(&coords), Mode::Eval);
        assert_eq!(w1.unwrap().data(), w2.unwrap().data());
    }

    #[test]
    fn caf_duplicate_coords_share_weight_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut p = FusionParams::<f64>::new(FusionKind::Caf, true, 1, 2, 4, &mut rng).unwrap();
        let mut coords = randn(vec![6, 3], 32);
        for c in 0..3 {
            let v = coords.data()[c];
            coords.data_mut()[3 * 3 + c] = v; // row 3 duplicates row 0
        }
        let point = randn(vec![6, 2], 33);
        let branch = randn(vec![6, 2], 34);
        let (_, w) = run(&mut p, Some(&point), &[branch], Some(&coords), Mode::Eval);
        let w = w.unwrap();
        assert_eq!(w.row(0), w.row(3));
    }

    #[test]
    fn caf_zero_final_layer_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut p = FusionParams::<f64>::new(FusionKind::Caf, true, 2, 2, 4, &mut rng).unwrap();
        let FusionParams::Caf { g2, .. } = &mut p else { unreachable!() };
        g2.w = Tensor::zeros(vec![CAF_G1, 3]);
        g2.b = Tensor::zeros(vec![3]);
        let coords = randn(vec![4, 3], 36);
        let point = randn(vec![4, 2], 37);
        let branches = [randn(vec![4, 2], 38), randn(vec![4, 2], 39)];
        let (_, w) = run(&mut p, Some(&point), &branches, Some(&coords), Mode::Eval);
        for v in w.unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn caf_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut p = FusionParams::<f64>::new(FusionKind::Caf, true, 1, 2, 4, &mut rng).unwrap();
        let coords = randn(vec![8, 3], 42);
        let point = randn(vec![8, 2], 43);
        let branch = randn(vec![8, 2], 44);
        let (out, _) = run(&mut p, Some(&point), &[branch.clone()], Some(&coords), Mode::Eval);

        let perm: Vec<usize> = vec![5, 2, 7, 0, 3, 6, 1, 4];
        let permute = |t: &Tensor<f64>| {
            Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap()
        };
        let (out_p, _) = run(
            &mut p,
            Some(&permute(&point)),
            &[permute(&branch)],
            Some(&permute(&coords)),
            Mode::Eval,
        );
        assert!(permute(&out).max_abs_diff(&out_p) < 1e-12);
    }

    #[test]
    fn caf_requires_coords() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut p = FusionParams::<f64>::new(FusionKind::Caf, true, 1, 2, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let point = tape.constant(randn(vec![3, 2], 46));
        let branch = tape.constant(randn(vec![3, 2], 47));
        let err = p.forward(
            &mut tape,
            "f",
            FusionInputs {
                point: Some(point),
                branches: &[branch],
                coords: None,
            },
            Mode::Eval,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn all_strategies_output_n_by_c_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let coords = randn(vec![5, 3], 50);
        let point = randn(vec![5, 4], 51);
        let branches = [randn(vec![5, 4], 52), randn(vec![5, 4], 53)];
        for kind in [FusionKind::Concat, FusionKind::Iwf, FusionKind::Caf] {
            let mut p = FusionParams::<f64>::new(kind, true, 2, 4, 8, &mut rng).unwrap();
            let (out, _) = run(&mut p, Some(&point), &branches, Some(&coords), Mode::Train);
            assert_eq!(out.shape(), &[5, 8], "{kind:?}");
        }
    }

    #[test]
    fn gradients_pass_for_all_strategies() {
        for (seed, kind) in [
            (60, FusionKind::Concat),
            (61, FusionKind::Iwf),
            (62, FusionKind::Caf),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = FusionParams::<f64>::new(kind, true, 1, 3, 4, &mut rng).unwrap();
            let coords = randn(vec![6, 3], seed + 100);
            let point = randn(vec![6, 3], seed + 200);
            let branch = randn(vec![6, 3], seed + 300);
            let report = grad_check_model(&mut p, "fuse", move |p, tape| {
                let pi = tape.constant(point.clone());
                let bi = tape.constant(branch.clone());
                let ci = tape.constant(coords.clone());
                let out = p.forward(
                    tape,
                    "fuse",
                    FusionInputs {
                        point: Some(pi),
                        branches: &[bi],
                        coords: Some(ci),
                    },
                    Mode::Train,
                )?;
                Ok(tape.sum_all(out.out))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{kind:?}: {}", report.max_rel_err);
        }
    }
}
