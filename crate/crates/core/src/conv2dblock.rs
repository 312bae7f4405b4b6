//! Planar transform between projection and backprojection: two 3x3
//! convolutions with batch norm and leaky ReLU, an optional identity
//! shortcut, and an optional squeeze-and-excitation rescale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3x3, Linear, ParamKind, Parameters};
use crate::numkernel::{ActKind, BnLayout, Mode, Scalar, Tape, Tensor, ValId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvVariant {
    /// [conv-BN-LReLU] x 2
    Plain,
    /// Adds the block input before the final activation.
    Residual,
    /// Residual plus channel rescale by the SE gate before the add.
    ResidualSe,
}

/// Reduction ratio of the SE bottleneck.
pub const SE_REDUCTION: usize = 4;

#[derive(Debug, Clone)]
pub struct SeResBlockParams<S> {
    pub conv1: Conv3x3<S>,
    pub bn1: BatchNorm<S>,
    pub conv2: Conv3x3<S>,
    pub bn2: BatchNorm<S>,
    pub se_reduce: Linear<S>,
    pub se_expand: Linear<S>,
    channels: usize,
}

impl<S: Scalar> SeResBlockParams<S> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || channels % SE_REDUCTION != 0 {
            return Err(Error::Config(format!(
                "conv block channels {channels} must be a positive multiple of {SE_REDUCTION}"
            )));
        }
        let hidden = channels / SE_REDUCTION;
        Ok(SeResBlockParams {
            conv1: Conv3x3::new(channels, channels, rng),
            bn1: BatchNorm::new(channels, BnLayout::ChannelsFirst),
            conv2: Conv3x3::new(channels, channels, rng),
            bn2: BatchNorm::new(channels, BnLayout::ChannelsFirst),
            se_reduce: Linear::new(channels, hidden, rng),
            se_expand: Linear::new(hidden, channels, rng),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Apply the block to a `(H*W) x C` cell tensor; spatial extents are
    /// preserved. The input is transposed to planar layout internally.
    pub fn forward(
        &mut self,
        tape: &mut Tape<S>,
        name: &str,
        cells: ValId,
        h: usize,
        w: usize,
        variant: ConvVariant,
        mode: Mode,
    ) -> Result<ValId> {
        if tape.value(cells).cols() != self.channels {
            return Err(Error::Dimension(format!(
                "conv block built for {} channels, map has {}",
                self.channels,
                tape.value(cells).cols()
            )));
        }
        let x = tape.hwc_to_chw(cells, h, w)?;

        let h1 = self.conv1.forward(tape, &format!("{name}.conv1"), x)?;
        let h1 = self.bn1.forward(tape, &format!("{name}.bn1"), h1, mode)?;
        let h1 = tape.activation(ActKind::LeakyRelu, h1);

        let h2 = self.conv2.forward(tape, &format!("{name}.conv2"), h1)?;
        let h2 = self.bn2.forward(tape, &format!("{name}.bn2"), h2, mode)?;

        let pre_act = match variant {
            ConvVariant::Plain => h2,
            ConvVariant::Residual => tape.add(h2, x)?,
            ConvVariant::ResidualSe => {
                let scaled = self.se_scale(tape, name, h2, mode)?;
                tape.add(scaled, x)?
            }
        };
        let out = tape.activation(ActKind::LeakyRelu, pre_act);
        tape.chw_to_hwc(out)
    }

    /// Squeeze (global average over all cells, empty ones included), excite
    /// (bottleneck MLP), rescale channels by the sigmoid gate.
    fn se_scale(&mut self, tape: &mut Tape<S>, name: &str, x: ValId, _mode: Mode) -> Result<ValId> {
        let squeezed = tape.global_avg_pool(x)?;
        let hid = self
            .se_reduce
            .forward(tape, &format!("{name}.se_reduce"), squeezed)?;
        let hid = tape.activation(ActKind::Relu, hid);
        let gate = self
            .se_expand
            .forward(tape, &format!("{name}.se_expand"), hid)?;
        let gate = tape.activation(ActKind::Sigmoid, gate);
        tape.scale_channels(x, gate)
    }
}

impl<S: Scalar> Parameters<S> for SeResBlockParams<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        self.se_reduce.visit(&format!("{prefix}.se_reduce"), f);
        self.se_expand.visit(&format!("{prefix}.se_expand"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<S>)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.bn1.visit_mut(&format!("{prefix}.bn1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        self.bn2.visit_mut(&format!("{prefix}.bn2"), f);
        self.se_reduce.visit_mut(&format!("{prefix}.se_reduce"), f);
        self.se_expand.visit_mut(&format!("{prefix}.se_expand"), f);
    }
}

/// Standalone application to an `H x W x C` feature map.
pub fn se_res_block<S: Scalar>(
    fm: &crate::projection::FeatureMap2D<S>,
    params: &mut SeResBlockParams<S>,
    variant: ConvVariant,
    mode: Mode,
) -> Result<crate::projection::FeatureMap2D<S>> {
    let (h, w, c) = (fm.height(), fm.width(), fm.channels());
    let mut tape = Tape::new();
    let cells = tape.constant(fm.values.clone().reshaped(vec![h * w, c])?);
    let out = params.forward(&mut tape, "block", cells, h, w, variant, mode)?;
    Ok(crate::projection::FeatureMap2D {
        values: tape.value(out).clone().reshaped(vec![h, w, c])?,
        provenance: fm.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{grad_check_model, kernels};
    use crate::projection::FeatureMap2D;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap2D<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap2D {
            values: Tensor::randn(vec![h, w, c], 1.0, &mut rng),
            provenance: 0,
        }
    }

    #[test]
    fn channels_must_divide_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SeResBlockParams::<f64>::new(6, &mut rng).is_err());
        assert!(SeResBlockParams::<f64>::new(8, &mut rng).is_ok());
    }

    #[test]
    fn zeroed_branch_leaves_lrelu_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = SeResBlockParams::<f64>::new(4, &mut rng).unwrap();
        p.conv1.k = Tensor::zeros(vec![4, 4, 3, 3]);
        p.conv2.k = Tensor::zeros(vec![4, 4, 3, 3]);
        p.bn1.gamma = Tensor::zeros(vec![4]);
        p.bn2.gamma = Tensor::zeros(vec![4]);
        let fm = random_map(3, 3, 4, 2);
        let out = se_res_block(&fm, &mut p, ConvVariant::Residual, Mode::Eval).unwrap();
        let want = kernels::activation(ActKind::LeakyRelu, &fm.values);
        assert!(out.values.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn se_logit_zero_halves_branch_before_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = SeResBlockParams::<f64>::new(4, &mut rng).unwrap();
        // Force excitation logits to zero: sigmoid gives exactly 0.5.
        p.se_expand.w = Tensor::zeros(vec![1, 4]);
        p.se_expand.b = Tensor::zeros(vec![4]);
        let fm = random_map(4, 4, 4, 5);

        let with_se = se_res_block(&fm, &mut p.clone(), ConvVariant::ResidualSe, Mode::Eval)
            .unwrap();
        // Oracle: run the residual variant but pre-scale the branch by hand.
        let mut tape = Tape::new();
        let cells = tape
            .constant(fm.values.clone().reshaped(vec![16, 4]).unwrap());
        let x = tape.hwc_to_chw(cells, 4, 4).unwrap();
        let mut q = p.clone();
        let h1 = q.conv1.forward(&mut tape, "c1", x).unwrap();
        let h1 = q.bn1.forward(&mut tape, "b1", h1, Mode::Eval).unwrap();
        let h1 = tape.activation(ActKind::LeakyRelu, h1);
        let h2 = q.conv2.forward(&mut tape, "c2", h1).unwrap();
        let h2 = q.bn2.forward(&mut tape, "b2", h2, Mode::Eval).unwrap();
        let half = tape.constant(Tensor::filled(vec![1, 4], 0.5));
        let scaled = tape.scale_channels(h2, half).unwrap();
        let sum = tape.add(scaled, x).unwrap();
        let out = tape.activation(ActKind::LeakyRelu, sum);
        let out = tape.chw_to_hwc(out).unwrap();
        let want = tape.value(out).clone();
        let got = with_se.values.clone().reshaped(vec![16, 4]).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn plain_variant_equals_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SeResBlockParams::<f64>::new(4, &mut rng).unwrap();
        let fm = random_map(4, 4, 4, 8);
        let out = se_res_block(&fm, &mut p.clone(), ConvVariant::Plain, Mode::Eval).unwrap();

        let chw = {
            let mut t = Tensor::zeros(vec![4, 4, 4]);
            for cell in 0..16 {
                for c in 0..4 {
                    t.data_mut()[c * 16 + cell] = fm.values.data()[cell * 4 + c];
                }
            }
            t
        };
        let mut st1 = p.bn1.stats.clone();
        let mut st2 = p.bn2.stats.clone();
        let h1 = kernels::conv2d(&chw, &p.conv1.k, &p.conv1.b).unwrap();
        let h1 = kernels::batchnorm(
            &h1,
            &p.bn1.gamma,
            &p.bn1.beta,
            &mut st1,
            BnLayout::ChannelsFirst,
            Mode::Eval,
        )
        .unwrap();
        let h1 = kernels::activation(ActKind::LeakyRelu, &h1);
        let h2 = kernels::conv2d(&h1, &p.conv2.k, &p.conv2.b).unwrap();
        let h2 = kernels::batchnorm(
            &h2,
            &p.bn2.gamma,
            &p.bn2.beta,
            &mut st2,
            BnLayout::ChannelsFirst,
            Mode::Eval,
        )
        .unwrap();
        let h2 = kernels::activation(ActKind::LeakyRelu, &h2);
        for cell in 0..16 {
            for c in 0..4 {
                assert_eq!(
                    out.values.data()[cell * 4 + c],
                    h2.data()[c * 16 + cell],
                    "cell {cell} channel {c}"
                );
            }
        }
    }

    #[test]
    fn spatial_extents_preserved_and_se_gate_open() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = SeResBlockParams::<f64>::new(8, &mut rng).unwrap();
        let fm = random_map(5, 7, 8, 10);
        for variant in [ConvVariant::Plain, ConvVariant::Residual, ConvVariant::ResidualSe] {
            let out = se_res_block(&fm, &mut p, variant, Mode::Train).unwrap();
            assert_eq!(out.values.shape(), &[5, 7, 8]);
        }
    }

    #[test]
    fn se_gate_lies_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut p = SeResBlockParams::<f64>::new(8, &mut rng).unwrap();
        crate::nn::jitter_biases(&mut p, &mut rng);
        let fm = random_map(4, 4, 8, 16);
        // Recompute the gate exactly as the block does.
        let mut tape = Tape::new();
        let cells = tape
            .constant(fm.values.clone().reshaped(vec![16, 8]).unwrap());
        let x = tape.hwc_to_chw(cells, 4, 4).unwrap();
        let h1 = p.conv1.forward(&mut tape, "c1", x).unwrap();
        let h1 = p.bn1.forward(&mut tape, "b1", h1, Mode::Train).unwrap();
        let h1 = tape.activation(ActKind::LeakyRelu, h1);
        let h2 = p.conv2.forward(&mut tape, "c2", h1).unwrap();
        let h2 = p.bn2.forward(&mut tape, "b2", h2, Mode::Train).unwrap();
        let squeezed = tape.global_avg_pool(h2).unwrap();
        let hid = p.se_reduce.forward(&mut tape, "sr", squeezed).unwrap();
        let hid = tape.activation(ActKind::Relu, hid);
        let gate = p.se_expand.forward(&mut tape, "se", hid).unwrap();
        let gate = tape.activation(ActKind::Sigmoid, gate);
        for &g in tape.value(gate).data() {
            assert!(g > 0.0 && g < 1.0, "gate {g}");
        }
    }

    #[test]
    fn residual_variant_ignores_se_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = SeResBlockParams::<f64>::new(4, &mut rng).unwrap();
        let mut a = p.clone();
        let mut b = p.clone();
        b.se_reduce.w = Tensor::filled(vec![4, 1], 9.0);
        b.se_expand.b = Tensor::filled(vec![4], -3.0);
        let fm = random_map(3, 3, 4, 12);
        let oa = se_res_block(&fm, &mut a, ConvVariant::Residual, Mode::Eval).unwrap();
        let ob = se_res_block(&fm, &mut b, ConvVariant::Residual, Mode::Eval).unwrap();
        assert_eq!(oa.values.data(), ob.values.data());
    }

    #[test]
    fn gradients_pass_for_all_variants() {
        for (seed, variant) in [
            (20, ConvVariant::Plain),
            (21, ConvVariant::Residual),
            (22, ConvVariant::ResidualSe),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = SeResBlockParams::<f64>::new(4, &mut rng).unwrap();
            crate::nn::jitter_biases(&mut p, &mut rng);
            let input = Tensor::<f64>::randn(vec![16, 4], 1.0, &mut rng);
            let report = grad_check_model(&mut p, "blk", move |p, tape| {
                let cells = tape.constant(input.clone());
                let out = p.forward(tape, "blk", cells, 4, 4, variant, Mode::Train)?;
                Ok(tape.sum_all(out))
            })
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{variant:?}: {}",
                report.max_rel_err
            );
        }
    }
}
