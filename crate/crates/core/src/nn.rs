//! Small parameterized building blocks shared by the point and projection
//! branches: linear layers, batch-norm state, and the linear+BN+ReLU unit the
//! network uses as its MLP convention. Also the parameter-walking trait that
//! the optimizer and checkpoints are built on.

use rand::Rng;

use crate::error::Result;
use crate::numkernel::{ActKind, BnLayout, BnStats, Mode, Scalar, Tape, Tensor, ValId};

/// Distinguishes trainable weights from tracked buffers (BN running stats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Walk every tensor a module owns under stable hierarchical names.
pub trait Parameters<S: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<S>));
}

/// Kaiming-style fan-in init for a linear layer.
pub fn kaiming<S: Scalar>(fan_in: usize, shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<S> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::randn(shape, std, rng)
}

/// Shift every bias-like tensor (anything that is not a weight or kernel)
/// off its init value. Freshly built layers sit exactly on activation kinks:
/// the squeeze of a train-mode BN output is identically zero because the
/// per-channel output mean equals beta, so the SE bottleneck ReLU straddles
/// zero and finite differences are meaningless there. Gradient checks move
/// to a generic operating point first.
pub fn jitter_biases<S: Scalar, M: Parameters<S>>(model: &mut M, rng: &mut impl Rng) {
    model.visit_mut("", &mut |name, kind, t| {
        if kind == ParamKind::Trainable && !name.ends_with(".w") && !name.ends_with(".k") {
            for v in t.data_mut() {
                let mag = rng.gen_range(0.05..0.4);
                *v += S::from_f64(if rng.gen_bool(0.5) { mag } else { -mag });
            }
        }
    });
}

#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: kaiming(cin, vec![cin, cout], rng),
            b: Tensor::zeros(vec![cout]),
        }
    }

    /// Identity-ish layer for tests: square identity weights, zero bias.
    pub fn identity(c: usize) -> Self {
        let mut w = Tensor::zeros(vec![c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = S::one();
        }
        Linear {
            w,
            b: Tensor::zeros(vec![c]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<S>, name: &str, x: ValId) -> Result<ValId> {
        let w = tape.param(&format!("{name}.w"), &self.w);
        let b = tape.param(&format!("{name}.b"), &self.b);
        tape.linear(x, w, b)
    }
}

impl<S: Scalar> Parameters<S> for Linear<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>)) {
        f(format!("{prefix}.w"), ParamKind::Trainable, &self.w);
        f(format!("{prefix}.b"), ParamKind::Trainable, &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<S>)) {
        f(format!("{prefix}.w"), ParamKind::Trainable, &mut self.w);
        f(format!("{prefix}.b"), ParamKind::Trainable, &mut self.b);
    }
}

/// Batch-norm layer: learnable gamma/beta plus running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub stats: BnStats<S>,
    pub layout: BnLayout,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize, layout: BnLayout) -> Self {
        BatchNorm {
            gamma: Tensor::filled(vec![channels], S::one()),
            beta: Tensor::zeros(vec![channels]),
            stats: BnStats::identity(channels),
            layout,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<S>, name: &str, x: ValId, mode: Mode) -> Result<ValId> {
        let gamma = tape.param(&format!("{name}.gamma"), &self.gamma);
        let beta = tape.param(&format!("{name}.beta"), &self.beta);
        tape.batchnorm(x, gamma, beta, &mut self.stats, self.layout, mode)
    }
}

impl<S: Scalar> Parameters<S> for BatchNorm<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>)) {
        f(format!("{prefix}.gamma"), ParamKind::Trainable, &self.gamma);
        f(format!("{prefix}.beta"), ParamKind::Trainable, &self.beta);
        f(
            format!("{prefix}.running_mean"),
            ParamKind::Buffer,
            &self.stats.mean,
        );
        f(
            format!("{prefix}.running_var"),
            ParamKind::Buffer,
            &self.stats.var,
        );
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<S>)) {
        f(
            format!("{prefix}.gamma"),
            ParamKind::Trainable,
            &mut self.gamma,
        );
        f(
            format!("{prefix}.beta"),
            ParamKind::Trainable,
            &mut self.beta,
        );
        f(
            format!("{prefix}.running_mean"),
            ParamKind::Buffer,
            &mut self.stats.mean,
        );
        f(
            format!("{prefix}.running_var"),
            ParamKind::Buffer,
            &mut self.stats.var,
        );
    }
}

/// The crate's MLP convention: one linear layer, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct Mlp<S> {
    pub linear: Linear<S>,
    pub bn: BatchNorm<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            linear: Linear::new(cin, cout, rng),
            bn: BatchNorm::new(cout, BnLayout::ChannelsLast),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<S>, name: &str, x: ValId, mode: Mode) -> Result<ValId> {
        let h = self.linear.forward(tape, &format!("{name}.lin"), x)?;
        let h = self.bn.forward(tape, &format!("{name}.bn"), h, mode)?;
        Ok(tape.activation(ActKind::Relu, h))
    }
}

impl<S: Scalar> Parameters<S> for Mlp<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>)) {
        self.linear.visit(&format!("{prefix}.lin"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<S>)) {
        self.linear.visit_mut(&format!("{prefix}.lin"), f);
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
    }
}

/// One 3x3 conv layer (stride 1, pad 1) with its kernel and bias.
#[derive(Debug, Clone)]
pub struct Conv3x3<S> {
    pub k: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Conv3x3<S> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Conv3x3 {
            k: kaiming(cin * 9, vec![cout, cin, 3, 3], rng),
            b: Tensor::zeros(vec![cout]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, name: &str, x: ValId) -> Result<ValId> {
        let k = tape.param(&format!("{name}.k"), &self.k);
        let b = tape.param(&format!("{name}.b"), &self.b);
        tape.conv2d(x, k, b)
    }
}

impl<S: Scalar> Parameters<S> for Conv3x3<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>)) {
        f(format!("{prefix}.k"), ParamKind::Trainable, &self.k);
        f(format!("{prefix}.b"), ParamKind::Trainable, &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<S>)) {
        f(format!("{prefix}.k"), ParamKind::Trainable, &mut self.k);
        f(format!("{prefix}.b"), ParamKind::Trainable, &mut self.b);
    }
}
