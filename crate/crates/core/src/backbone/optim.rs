//! Adam with optional cosine learning-rate decay; updates any module that
//! exposes its parameters by name.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::nn::{ParamKind, Parameters};
use crate::numkernel::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine-decay the learning rate to zero over `total_steps`.
    pub cosine_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            // 3e-3 reaches the desk-scale overfit target within 200 steps;
            // 1e-3 stalls short of it under cosine decay.
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine_decay: true,
        }
    }
}

pub struct Adam<S> {
    cfg: OptimizerConfig,
    total_steps: usize,
    step: usize,
    m: HashMap<String, Vec<S>>,
    v: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: OptimizerConfig, total_steps: usize) -> Self {
        Adam {
            cfg,
            total_steps: total_steps.max(1),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.cfg.cosine_decay {
            let t = (self.step as f64 / self.total_steps as f64).min(1.0);
            self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.cfg.lr
        }
    }

    /// Apply one update from named gradients; buffers are left alone and
    /// parameters without a gradient entry are skipped.
    pub fn step<M: Parameters<S>>(
        &mut self,
        model: &mut M,
        root: &str,
        grads: &HashMap<String, Tensor<S>>,
    ) {
        let lr = S::from_f64(self.current_lr());
        self.step += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let t = self.step as i32;
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);

        let m_map = &mut self.m;
        let v_map = &mut self.v;
        model.visit_mut(root, &mut |name, kind, tensor| {
            if kind != ParamKind::Trainable {
                return;
            }
            let Some(grad) = grads.get(&name) else {
                return;
            };
            let m = m_map
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); tensor.len()]);
            let v = v_map
                .entry(name)
                .or_insert_with(|| vec![S::zero(); tensor.len()]);
            for ((p, &g), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (S::one() - b1) * g;
                *vi = b2 * *vi + (S::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn cosine_decay_reaches_zero() {
        let mut adam = Adam::<f32>::new(OptimizerConfig::default(), 10);
        assert!((adam.current_lr() - OptimizerConfig::default().lr).abs() < 1e-12);
        for _ in 0..10 {
            adam.step(
                &mut Linear::<f32>::identity(1),
                "l",
                &HashMap::new(),
            );
        }
        assert!(adam.current_lr() < 1e-9);
    }

    #[test]
    fn descends_a_quadratic() {
        // min_w (w - 3)^2 via explicit gradient 2(w - 3).
        let mut lin = Linear::<f64>::identity(1); // w starts at 1
        let mut adam = Adam::new(
            OptimizerConfig {
                lr: 0.1,
                cosine_decay: false,
                ..OptimizerConfig::default()
            },
            1000,
        );
        for _ in 0..500 {
            let w = lin.w.data()[0];
            let mut grads = HashMap::new();
            grads.insert(
                "l.w".to_string(),
                Tensor::new(vec![1, 1], vec![2.0 * (w - 3.0)]).unwrap(),
            );
            adam.step(&mut lin, "l", &grads);
        }
        assert!((lin.w.data()[0] - 3.0).abs() < 1e-3);
    }
}
