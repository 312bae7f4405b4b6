//! Central finite-difference verification of tape gradients. Always runs in
//! f64; the step `h = 1e-5` leaves plenty of headroom against the 1e-4
//! pass threshold used across the crate.

use crate::error::{Error, Result};

use super::tape::{Tape, ValId};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Outcome of checking one differentiable unit.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over parameter elements of |g_ad - g_fd| / max(1, |g_fd|)
    pub max_rel_err: f64,
    pub params_checked: usize,
}

/// Compare tape gradients of a scalar-valued function against central finite
/// differences over every element of `params`.
///
/// `f` must rebuild the computation from scratch on the tape it is handed;
/// it receives the parameter values in `params` order, already registered.
pub fn grad_check<F>(params: &[Tensor<f64>], mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[ValId]) -> Result<ValId>,
{
    let mut eval = |ps: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let ids: Vec<ValId> = ps
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(&format!("p{i}"), t))
            .collect();
        let loss = f(&mut tape, &ids)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::Dimension("grad_check: loss must be scalar".into()));
        }
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite loss".into()));
        }
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
            })
            .collect();
        Ok((value, grads))
    };

    let (_, ad_grads) = eval(params, true)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (pi, grad) in ad_grads.iter().enumerate() {
        for ei in 0..grad.len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + FD_STEP;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[ei] = orig - FD_STEP;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[ei] = orig;

            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ad = grad.data()[ei];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        params_checked: checked,
    })
}

/// Gradient-check a module that registers its own parameters on the tape by
/// name (through [`crate::nn::Parameters`]). `forward` must rebuild the loss
/// from scratch and register parameters under the same `root` prefix the
/// visitor uses; buffers (running statistics) are not checked.
pub fn grad_check_model<M, F>(model: &mut M, root: &str, mut forward: F) -> Result<GradCheckReport>
where
    M: crate::nn::Parameters<f64>,
    F: FnMut(&mut M, &mut Tape<f64>) -> Result<ValId>,
{
    use crate::nn::ParamKind;
    use std::collections::HashMap;

    let mut eval = |m: &mut M, want_grads: bool| -> Result<(f64, HashMap<String, Tensor<f64>>)> {
        let mut tape = Tape::new();
        let loss = forward(m, &mut tape)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::Dimension("grad_check: loss must be scalar".into()));
        }
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite loss".into()));
        }
        if !want_grads {
            return Ok((value, HashMap::new()));
        }
        tape.backward(loss)?;
        Ok((value, tape.param_grads().into_iter().collect()))
    };

    let (_, grads) = eval(model, true)?;

    let mut slots: Vec<(String, usize)> = Vec::new();
    model.visit(root, &mut |name, kind, t| {
        if kind == ParamKind::Trainable {
            slots.push((name, t.len()));
        }
    });

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (name, len) in &slots {
        let grad = grads.get(name);
        for ei in 0..*len {
            let orig = read_elem(model, root, name, ei);
            write_elem(model, root, name, ei, orig + FD_STEP);
            let (plus, _) = eval(model, false)?;
            write_elem(model, root, name, ei, orig - FD_STEP);
            let (minus, _) = eval(model, false)?;
            write_elem(model, root, name, ei, orig);

            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ad = grad.map(|g| g.data()[ei]).unwrap_or(0.0);
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        params_checked: checked,
    })
}

fn read_elem<M: crate::nn::Parameters<f64>>(m: &mut M, root: &str, name: &str, idx: usize) -> f64 {
    let mut out = None;
    m.visit(root, &mut |n, _, t| {
        if n == name {
            out = Some(t.data()[idx]);
        }
    });
    out.unwrap_or_else(|| panic!("param {name} not found"))
}

fn write_elem<M: crate::nn::Parameters<f64>>(
    m: &mut M,
    root: &str,
    name: &str,
    idx: usize,
    v: f64,
) {
    let mut hit = false;
    m.visit_mut(root, &mut |n, _, t| {
        if n == name {
            t.data_mut()[idx] = v;
            hit = true;
        }
    });
    assert!(hit, "param {name} not found");
}
