//! Wengert tape: every kernel invocation is executed eagerly and recorded
//! together with whatever its backward rule needs. `backward` replays the
//! record in exact reverse order, accumulating gradients additively whenever
//! a value feeds multiple consumers.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::kernels::{self, ActKind, BnLayout, BnStats, Mode, LEAKY_SLOPE};
use super::tensor::{Scalar, Tensor};

/// Index of a value in the tape arena.
pub type ValId = usize;

#[derive(Debug)]
enum Op<S> {
    Linear {
        x: ValId,
        w: ValId,
        b: ValId,
        out: ValId,
    },
    Conv2d {
        x: ValId,
        k: ValId,
        b: ValId,
        out: ValId,
    },
    BatchNorm {
        x: ValId,
        gamma: ValId,
        beta: ValId,
        out: ValId,
        layout: BnLayout,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    Activation {
        kind: ActKind,
        x: ValId,
        out: ValId,
    },
    SoftmaxRows {
        x: ValId,
        out: ValId,
    },
    SegmentedMax {
        x: ValId,
        out: ValId,
        argmax: Vec<u32>,
    },
    SegmentedMean {
        x: ValId,
        out: ValId,
        seg: Vec<u32>,
        counts: Vec<u32>,
    },
    ScatterBilinear {
        x: ValId,
        out: ValId,
        contribs: Vec<(u32, u32, S)>,
        scale: Vec<S>,
    },
    GatherRows {
        x: ValId,
        out: ValId,
        idx: Vec<u32>,
    },
    ScaleRows {
        x: ValId,
        out: ValId,
        w: Vec<S>,
    },
    WeightedGather {
        x: ValId,
        out: ValId,
        idx: Vec<u32>,
        w: Vec<S>,
        k: usize,
    },
    ConcatCols {
        parts: Vec<ValId>,
        out: ValId,
    },
    Add {
        a: ValId,
        b: ValId,
        out: ValId,
    },
    ScaleChannels {
        x: ValId,
        s: ValId,
        out: ValId,
    },
    GlobalAvgPool {
        x: ValId,
        out: ValId,
    },
    ColMax {
        x: ValId,
        out: ValId,
        argmax: Vec<u32>,
    },
    BroadcastRows {
        x: ValId,
        out: ValId,
        n: usize,
    },
    WeightedSumRows {
        w: ValId,
        feats: Vec<ValId>,
        out: ValId,
    },
    CrossEntropy {
        logits: ValId,
        out: ValId,
        labels: Vec<u32>,
        probs: Vec<S>,
    },
    MeanScalars {
        xs: Vec<ValId>,
        out: ValId,
    },
    SumAll {
        x: ValId,
        out: ValId,
    },
    HwcToChw {
        x: ValId,
        out: ValId,
        h: usize,
        w: usize,
        c: usize,
    },
    ChwToHwc {
        x: ValId,
        out: ValId,
        h: usize,
        w: usize,
        c: usize,
    },
    /// Identity with a deliberately wrong backward rule (scales the incoming
    /// gradient by 1.1). Exists so the gradient checker can prove it detects
    /// a bad rule; never used by real layers.
    BadIdentity {
        x: ValId,
        out: ValId,
    },
}

pub struct Tape<S> {
    vals: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(String, ValId)>,
    by_name: HashMap<String, ValId>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn push(&mut self, t: Tensor<S>) -> ValId {
        self.vals.push(t);
        self.vals.len() - 1
    }

    pub fn constant(&mut self, t: Tensor<S>) -> ValId {
        self.push(t)
    }

    /// Register a named parameter. Registering the same name again returns
    /// the existing slot, so a layer used several times in one step
    /// accumulates one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<S>) -> ValId {
        if let Some(&id) = self.by_name.get(name) {
            debug_assert_eq!(self.vals[id].len(), t.len(), "param {name} resized");
            return id;
        }
        let id = self.push(t.clone());
        self.params.push((name.to_string(), id));
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn value(&self, id: ValId) -> &Tensor<S> {
        &self.vals[id]
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        self.vals[id].shape()
    }

    pub fn grad(&self, id: ValId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Named parameter gradients after `backward`; zero tensors where no
    /// gradient flowed.
    pub fn param_grads(&self) -> Vec<(String, Tensor<S>)> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = self
                    .grads
                    .get(*id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.vals[*id].shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    // ── recorded kernels ─────────────────────────────────────────────

    pub fn linear(&mut self, x: ValId, w: ValId, b: ValId) -> Result<ValId> {
        let out = kernels::linear(&self.vals[x], &self.vals[w], &self.vals[b])?;
        let out = self.push(out);
        self.ops.push(Op::Linear { x, w, b, out });
        Ok(out)
    }

    pub fn conv2d(&mut self, x: ValId, k: ValId, b: ValId) -> Result<ValId> {
        let out = kernels::conv2d(&self.vals[x], &self.vals[k], &self.vals[b])?;
        let out = self.push(out);
        self.ops.push(Op::Conv2d { x, k, b, out });
        Ok(out)
    }

    pub fn batchnorm(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        stats: &mut BnStats<S>,
        layout: BnLayout,
        mode: Mode,
    ) -> Result<ValId> {
        let (out, xhat, inv_std) = batchnorm_full(
            &self.vals[x],
            &self.vals[gamma],
            &self.vals[beta],
            stats,
            layout,
            mode,
        )?;
        let out = self.push(out);
        self.ops.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            layout,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        });
        Ok(out)
    }

    pub fn activation(&mut self, kind: ActKind, x: ValId) -> ValId {
        let out = kernels::activation(kind, &self.vals[x]);
        let out = self.push(out);
        self.ops.push(Op::Activation { kind, x, out });
        out
    }

    pub fn softmax_rows(&mut self, x: ValId) -> Result<ValId> {
        let out = kernels::softmax_rows(&self.vals[x])?;
        let out = self.push(out);
        self.ops.push(Op::SoftmaxRows { x, out });
        Ok(out)
    }

    pub fn segmented_max(&mut self, x: ValId, ids: &[u32], segments: usize) -> Result<ValId> {
        let (out, argmax) = kernels::segmented_max(&self.vals[x], ids, segments)?;
        let out = self.push(out);
        self.ops.push(Op::SegmentedMax { x, out, argmax });
        Ok(out)
    }

    pub fn segmented_mean(&mut self, x: ValId, ids: &[u32], segments: usize) -> Result<ValId> {
        let (n, c) = (self.vals[x].rows(), self.vals[x].cols());
        if ids.len() != n {
            return Err(Error::Dimension(format!(
                "segmented_mean: {} rows vs {} ids",
                n,
                ids.len()
            )));
        }
        let mut counts = vec![0u32; segments];
        for &s in ids {
            if s as usize >= segments {
                return Err(Error::Index(format!("segment id {s} of {segments}")));
            }
            counts[s as usize] += 1;
        }
        let mut out = Tensor::zeros(vec![segments, c]);
        {
            let xd = self.vals[x].data();
            let od = out.data_mut();
            for (row, &s) in ids.iter().enumerate() {
                let orow = &mut od[s as usize * c..(s as usize + 1) * c];
                for (o, &v) in orow.iter_mut().zip(&xd[row * c..(row + 1) * c]) {
                    *o += v;
                }
            }
            for (s, &cnt) in counts.iter().enumerate() {
                if cnt > 0 {
                    let inv = S::one() / S::from_f64(cnt as f64);
                    for o in &mut od[s * c..(s + 1) * c] {
                        *o *= inv;
                    }
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::SegmentedMean {
            x,
            out,
            seg: ids.to_vec(),
            counts,
        });
        Ok(out)
    }

    /// Weight-normalized scatter: `out[cell, :] = sum_i w_i x[p_i, :] / sum_i w_i`
    /// over the given contributions; cells receiving none stay exactly zero.
    pub fn scatter_bilinear(
        &mut self,
        x: ValId,
        cells: usize,
        contribs: Vec<(u32, u32, S)>,
    ) -> Result<ValId> {
        let (n, c) = (self.vals[x].rows(), self.vals[x].cols());
        let mut denom = vec![S::zero(); cells];
        for &(p, cell, w) in &contribs {
            if p as usize >= n || cell as usize >= cells {
                return Err(Error::Index(format!(
                    "scatter contribution ({p}, {cell}) outside {n} points / {cells} cells"
                )));
            }
            denom[cell as usize] += w;
        }
        let scale: Vec<S> = denom
            .iter()
            .map(|&d| if d > S::zero() { S::one() / d } else { S::zero() })
            .collect();
        let mut out = Tensor::zeros(vec![cells, c]);
        {
            let xd = self.vals[x].data();
            let od = out.data_mut();
            for &(p, cell, w) in &contribs {
                let f = w * scale[cell as usize];
                let orow = &mut od[cell as usize * c..(cell as usize + 1) * c];
                for (o, &v) in orow.iter_mut().zip(&xd[p as usize * c..(p as usize + 1) * c]) {
                    *o += f * v;
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::ScatterBilinear {
            x,
            out,
            contribs,
            scale,
        });
        Ok(out)
    }

    pub fn gather_rows(&mut self, x: ValId, idx: &[u32]) -> Result<ValId> {
        let (n, c) = (self.vals[x].rows(), self.vals[x].cols());
        let mut out = Tensor::zeros(vec![idx.len(), c]);
        {
            let xd = self.vals[x].data();
            let od = out.data_mut();
            for (row, &i) in idx.iter().enumerate() {
                if i as usize >= n {
                    return Err(Error::Index(format!("gather row {i} of {n}")));
                }
                od[row * c..(row + 1) * c]
                    .copy_from_slice(&xd[i as usize * c..(i as usize + 1) * c]);
            }
        }
        let out = self.push(out);
        self.ops.push(Op::GatherRows {
            x,
            out,
            idx: idx.to_vec(),
        });
        Ok(out)
    }

    /// Scale row `r` by the constant `w[r]`.
    pub fn scale_rows(&mut self, x: ValId, w: Vec<S>) -> Result<ValId> {
        let (n, c) = (self.vals[x].rows(), self.vals[x].cols());
        if w.len() != n {
            return Err(Error::Dimension(format!(
                "scale_rows: {} rows vs {} weights",
                n,
                w.len()
            )));
        }
        let mut out = self.vals[x].clone();
        for (row, &wv) in w.iter().enumerate() {
            for v in &mut out.data_mut()[row * c..(row + 1) * c] {
                *v *= wv;
            }
        }
        let out = self.push(out);
        self.ops.push(Op::ScaleRows { x, out, w });
        Ok(out)
    }

    /// `out[i, :] = sum_t w[i*k+t] * x[idx[i*k+t], :]` with constant weights.
    pub fn weighted_gather(
        &mut self,
        x: ValId,
        idx: Vec<u32>,
        w: Vec<S>,
        k: usize,
    ) -> Result<ValId> {
        if idx.len() != w.len() || k == 0 || idx.len() % k != 0 {
            return Err(Error::Dimension("weighted_gather: index/weight layout".into()));
        }
        let (n, c) = (self.vals[x].rows(), self.vals[x].cols());
        let rows = idx.len() / k;
        let mut out = Tensor::zeros(vec![rows, c]);
        {
            let xd = self.vals[x].data();
            let od = out.data_mut();
            for row in 0..rows {
                let orow = &mut od[row * c..(row + 1) * c];
                for t in 0..k {
                    let i = idx[row * k + t] as usize;
                    if i >= n {
                        return Err(Error::Index(format!("weighted_gather row {i} of {n}")));
                    }
                    let wv = w[row * k + t];
                    for (o, &v) in orow.iter_mut().zip(&xd[i * c..(i + 1) * c]) {
                        *o += wv * v;
                    }
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::WeightedGather { x, out, idx, w, k });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[ValId]) -> Result<ValId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols: no parts".into()));
        }
        let n = self.vals[parts[0]].rows();
        let mut width = 0;
        for &p in parts {
            if self.vals[p].rows() != n {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {} vs {}",
                    n,
                    self.vals[p].rows()
                )));
            }
            width += self.vals[p].cols();
        }
        let mut out = Tensor::zeros(vec![n, width]);
        {
            let od = out.data_mut();
            for row in 0..n {
                let mut off = row * width;
                for &p in parts {
                    let c = self.vals[p].cols();
                    od[off..off + c].copy_from_slice(self.vals[p].row(row));
                    off += c;
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::ConcatCols {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        if self.vals[a].shape() != self.vals[b].shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                self.vals[a].shape(),
                self.vals[b].shape()
            )));
        }
        let mut out = self.vals[a].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.vals[b].data()) {
            *o += v;
        }
        let out = self.push(out);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    /// Scale each channel plane of a `C x H x W` map by `s[c]` (`s` is `1 x C`).
    pub fn scale_channels(&mut self, x: ValId, s: ValId) -> Result<ValId> {
        let xs = self.vals[x].shape().to_vec();
        if xs.len() != 3 || self.vals[s].len() != xs[0] {
            return Err(Error::Dimension(format!(
                "scale_channels: map {:?} vs scales {:?}",
                xs,
                self.vals[s].shape()
            )));
        }
        let hw = xs[1] * xs[2];
        let mut out = self.vals[x].clone();
        for c in 0..xs[0] {
            let sv = self.vals[s].data()[c];
            for v in &mut out.data_mut()[c * hw..(c + 1) * hw] {
                *v *= sv;
            }
        }
        let out = self.push(out);
        self.ops.push(Op::ScaleChannels { x, s, out });
        Ok(out)
    }

    /// `C x H x W` -> `1 x C` mean over all cells (empty ones included).
    pub fn global_avg_pool(&mut self, x: ValId) -> Result<ValId> {
        let xs = self.vals[x].shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("global_avg_pool: {:?}", xs)));
        }
        let hw = xs[1] * xs[2];
        let inv = S::one() / S::from_f64(hw as f64);
        let mut out = Tensor::zeros(vec![1, xs[0]]);
        for c in 0..xs[0] {
            let sum: S = self.vals[x].data()[c * hw..(c + 1) * hw]
                .iter()
                .copied()
                .sum();
            out.data_mut()[c] = sum * inv;
        }
        let out = self.push(out);
        self.ops.push(Op::GlobalAvgPool { x, out });
        Ok(out)
    }

    /// Column-wise max over all rows: `N x C` -> `1 x C`.
    pub fn col_max(&mut self, x: ValId) -> Result<ValId> {
        let (n, c) = (self.vals[x].rows(), self.vals[x].cols());
        if n == 0 {
            return Err(Error::Degenerate("col_max on empty tensor".into()));
        }
        let mut out = Tensor::zeros(vec![1, c]);
        let mut argmax = vec![0u32; c];
        {
            let xd = self.vals[x].data();
            let od = out.data_mut();
            od.copy_from_slice(&xd[..c]);
            for row in 1..n {
                for col in 0..c {
                    let v = xd[row * c + col];
                    if v > od[col] {
                        od[col] = v;
                        argmax[col] = row as u32;
                    }
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::ColMax { x, out, argmax });
        Ok(out)
    }

    /// Repeat a `1 x C` row `n` times.
    pub fn broadcast_rows(&mut self, x: ValId, n: usize) -> Result<ValId> {
        let c = self.vals[x].cols();
        if self.vals[x].rows() != 1 {
            return Err(Error::Dimension("broadcast_rows expects 1 x C".into()));
        }
        let mut out = Tensor::zeros(vec![n, c]);
        for row in 0..n {
            let src = self.vals[x].data().to_vec();
            out.data_mut()[row * c..(row + 1) * c].copy_from_slice(&src);
        }
        let out = self.push(out);
        self.ops.push(Op::BroadcastRows { x, out, n });
        Ok(out)
    }

    /// `out[n, :] = sum_b w[n, b] * feats[b][n, :]`.
    pub fn weighted_sum_rows(&mut self, w: ValId, feats: &[ValId]) -> Result<ValId> {
        let (n, b) = (self.vals[w].rows(), self.vals[w].cols());
        if feats.len() != b {
            return Err(Error::Dimension(format!(
                "weighted_sum_rows: {} weight columns vs {} features",
                b,
                feats.len()
            )));
        }
        let c = self.vals[feats[0]].cols();
        for &f in feats {
            if self.vals[f].rows() != n || self.vals[f].cols() != c {
                return Err(Error::Dimension("weighted_sum_rows: feature shapes".into()));
            }
        }
        let mut out = Tensor::zeros(vec![n, c]);
        {
            let wd = self.vals[w].data();
            let od = out.data_mut();
            for (bi, &f) in feats.iter().enumerate() {
                let fd = self.vals[f].data();
                for row in 0..n {
                    let wv = wd[row * b + bi];
                    let orow = &mut od[row * c..(row + 1) * c];
                    for (o, &v) in orow.iter_mut().zip(&fd[row * c..(row + 1) * c]) {
                        *o += wv * v;
                    }
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::WeightedSumRows {
            w,
            feats: feats.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Mean over points of `-log softmax(logits)[label]`, log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: ValId, labels: &[u32]) -> Result<ValId> {
        let (n, k) = (self.vals[logits].rows(), self.vals[logits].cols());
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} rows vs {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Data(format!("label {bad} out of range 0..{k}")));
        }
        let probs = kernels::softmax_rows(&self.vals[logits])?;
        let mut total = S::zero();
        for (row, &label) in labels.iter().enumerate() {
            let xrow = self.vals[logits].row(row);
            let m = xrow.iter().fold(xrow[0], |m, &v| if v > m { v } else { m });
            let lse = xrow.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
            total += lse - xrow[label as usize];
        }
        let loss = total / S::from_f64(n as f64);
        let out = self.push(Tensor::scalar(loss));
        self.ops.push(Op::CrossEntropy {
            logits,
            out,
            labels: labels.to_vec(),
            probs: probs.data().to_vec(),
        });
        Ok(out)
    }

    pub fn mean_scalars(&mut self, xs: &[ValId]) -> Result<ValId> {
        if xs.is_empty() {
            return Err(Error::Dimension("mean_scalars: empty".into()));
        }
        let mut sum = S::zero();
        for &x in xs {
            if self.vals[x].len() != 1 {
                return Err(Error::Dimension("mean_scalars: non-scalar input".into()));
            }
            sum += self.vals[x].data()[0];
        }
        let out = self.push(Tensor::scalar(sum / S::from_f64(xs.len() as f64)));
        self.ops.push(Op::MeanScalars {
            xs: xs.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: ValId) -> ValId {
        let s: S = self.vals[x].data().iter().copied().sum();
        let out = self.push(Tensor::scalar(s));
        self.ops.push(Op::SumAll { x, out });
        out
    }

    /// Reinterpret a `(H*W) x C` cell tensor as a `C x H x W` planar map.
    pub fn hwc_to_chw(&mut self, x: ValId, h: usize, w: usize) -> Result<ValId> {
        let c = self.vals[x].cols();
        if self.vals[x].rows() != h * w {
            return Err(Error::Dimension(format!(
                "hwc_to_chw: {} rows vs {}x{}",
                self.vals[x].rows(),
                h,
                w
            )));
        }
        let mut out = Tensor::zeros(vec![c, h, w]);
        {
            let xd = self.vals[x].data();
            let od = out.data_mut();
            for cell in 0..h * w {
                for col in 0..c {
                    od[col * h * w + cell] = xd[cell * c + col];
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::HwcToChw { x, out, h, w, c });
        Ok(out)
    }

    /// Inverse of [`Tape::hwc_to_chw`].
    pub fn chw_to_hwc(&mut self, x: ValId) -> Result<ValId> {
        let xs = self.vals[x].shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("chw_to_hwc: {:?}", xs)));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(vec![h * w, c]);
        {
            let xd = self.vals[x].data();
            let od = out.data_mut();
            for cell in 0..h * w {
                for col in 0..c {
                    od[cell * c + col] = xd[col * h * w + cell];
                }
            }
        }
        let out = self.push(out);
        self.ops.push(Op::ChwToHwc { x, out, h, w, c });
        Ok(out)
    }

    pub fn debug_bad_identity(&mut self, x: ValId) -> ValId {
        let out = self.push(self.vals[x].clone());
        self.ops.push(Op::BadIdentity { x, out });
        out
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Seed the (scalar) loss with 1 and replay all ops in reverse.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if self.vals[loss].len() != 1 {
            return Err(Error::Dimension("backward expects a scalar loss".into()));
        }
        if !self.vals[loss].data()[0].is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.vals.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(S::one()));
        for op in self.ops.iter().rev() {
            Self::backward_op(&self.vals, op, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_op(vals: &[Tensor<S>], op: &Op<S>, grads: &mut [Option<Tensor<S>>]) {
        let out_id = match op {
            Op::Linear { out, .. }
            | Op::Conv2d { out, .. }
            | Op::BatchNorm { out, .. }
            | Op::Activation { out, .. }
            | Op::SoftmaxRows { out, .. }
            | Op::SegmentedMax { out, .. }
            | Op::SegmentedMean { out, .. }
            | Op::ScatterBilinear { out, .. }
            | Op::GatherRows { out, .. }
            | Op::ScaleRows { out, .. }
            | Op::WeightedGather { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::Add { out, .. }
            | Op::ScaleChannels { out, .. }
            | Op::GlobalAvgPool { out, .. }
            | Op::ColMax { out, .. }
            | Op::BroadcastRows { out, .. }
            | Op::WeightedSumRows { out, .. }
            | Op::CrossEntropy { out, .. }
            | Op::MeanScalars { out, .. }
            | Op::SumAll { out, .. }
            | Op::HwcToChw { out, .. }
            | Op::ChwToHwc { out, .. }
            | Op::BadIdentity { out, .. } => *out,
        };
        // All inputs precede the output in the arena, so a split borrow gives
        // the output gradient read-only alongside mutable input gradients.
        let (lo, hi) = grads.split_at_mut(out_id);
        let dout = match &hi[0] {
            Some(g) => g,
            None => return,
        };
        let dout = dout.data();

        match op {
            Op::Linear { x, w, b, out: _ } => {
                let (n, cin) = (vals[*x].rows(), vals[*x].cols());
                let cout = vals[*w].shape()[1];
                let xd = vals[*x].data();
                let wd = vals[*w].data();
                {
                    let dx = grad_buf(lo, vals, *x);
                    for row in 0..n {
                        let drow = &dout[row * cout..(row + 1) * cout];
                        for ci in 0..cin {
                            let wrow = &wd[ci * cout..(ci + 1) * cout];
                            let mut acc = S::zero();
                            for (dv, wv) in drow.iter().zip(wrow) {
                                acc += *dv * *wv;
                            }
                            dx[row * cin + ci] += acc;
                        }
                    }
                }
                {
                    let dw = grad_buf(lo, vals, *w);
                    for row in 0..n {
                        let drow = &dout[row * cout..(row + 1) * cout];
                        for ci in 0..cin {
                            let xv = xd[row * cin + ci];
                            let wrow = &mut dw[ci * cout..(ci + 1) * cout];
                            for (g, dv) in wrow.iter_mut().zip(drow) {
                                *g += xv * *dv;
                            }
                        }
                    }
                }
                {
                    let db = grad_buf(lo, vals, *b);
                    for row in 0..n {
                        for (g, dv) in db.iter_mut().zip(&dout[row * cout..(row + 1) * cout]) {
                            *g += *dv;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, out: _ } => {
                let xs = vals[*x].shape();
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let cout = vals[*k].shape()[0];
                let xd = vals[*x].data();
                let kd = vals[*k].data();
                {
                    let dx = grad_buf(lo, vals, *x);
                    for co in 0..cout {
                        let dplane = &dout[co * h * w..(co + 1) * h * w];
                        for ci in 0..cin {
                            let dxplane = &mut dx[ci * h * w..(ci + 1) * h * w];
                            for ki in 0..3usize {
                                for kj in 0..3usize {
                                    let kv = kd[((co * cin + ci) * 3 + ki) * 3 + kj];
                                    if kv == S::zero() {
                                        continue;
                                    }
                                    let di = ki as isize - 1;
                                    let dj = kj as isize - 1;
                                    for i in 0..h as isize {
                                        let si = i + di;
                                        if si < 0 || si >= h as isize {
                                            continue;
                                        }
                                        let drow = i as usize * w;
                                        let xrow = si as usize * w;
                                        let j_lo = (-dj).max(0) as usize;
                                        let j_hi = (w as isize).min(w as isize - dj) as usize;
                                        for j in j_lo..j_hi {
                                            dxplane[xrow + (j as isize + dj) as usize] +=
                                                dplane[drow + j] * kv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let dk = grad_buf(lo, vals, *k);
                    for co in 0..cout {
                        let dplane = &dout[co * h * w..(co + 1) * h * w];
                        for ci in 0..cin {
                            let xplane = &xd[ci * h * w..(ci + 1) * h * w];
                            for ki in 0..3usize {
                                for kj in 0..3usize {
                                    let di = ki as isize - 1;
                                    let dj = kj as isize - 1;
                                    let mut acc = S::zero();
                                    for i in 0..h as isize {
                                        let si = i + di;
                                        if si < 0 || si >= h as isize {
                                            continue;
                                        }
                                        let drow = i as usize * w;
                                        let xrow = si as usize * w;
                                        let j_lo = (-dj).max(0) as usize;
                                        let j_hi = (w as isize).min(w as isize - dj) as usize;
                                        for j in j_lo..j_hi {
                                            acc += dplane[drow + j]
                                                * xplane[xrow + (j as isize + dj) as usize];
                                        }
                                    }
                                    dk[((co * cin + ci) * 3 + ki) * 3 + kj] += acc;
                                }
                            }
                        }
                    }
                }
                {
                    let db = grad_buf(lo, vals, *b);
                    for co in 0..cout {
                        let mut acc = S::zero();
                        for &dv in &dout[co * h * w..(co + 1) * h * w] {
                            acc += dv;
                        }
                        db[co] += acc;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                out: _,
                layout,
                xhat,
                inv_std,
                train,
            } => {
                let (channels, elems) = kernels::bn_dims(&vals[*x], *layout).expect("bn dims");
                let gd = vals[*gamma].data();
                let inv_m = S::one() / S::from_f64(elems as f64);
                let index = |e: usize, c: usize| -> usize {
                    match layout {
                        BnLayout::ChannelsLast => e * channels + c,
                        BnLayout::ChannelsFirst => c * elems + e,
                    }
                };
                {
                    let dx = grad_buf(lo, vals, *x);
                    for c in 0..channels {
                        let g = gd[c];
                        let istd = inv_std[c];
                        if *train {
                            let mut s1 = S::zero();
                            let mut s2 = S::zero();
                            for e in 0..elems {
                                let i = index(e, c);
                                let dxh = dout[i] * g;
                                s1 += dxh;
                                s2 += dxh * xhat[i];
                            }
                            s1 *= inv_m;
                            s2 *= inv_m;
                            for e in 0..elems {
                                let i = index(e, c);
                                let dxh = dout[i] * g;
                                dx[i] += istd * (dxh - s1 - xhat[i] * s2);
                            }
                        } else {
                            let f = g * istd;
                            for e in 0..elems {
                                let i = index(e, c);
                                dx[i] += dout[i] * f;
                            }
                        }
                    }
                }
                {
                    let dg = grad_buf(lo, vals, *gamma);
                    for c in 0..channels {
                        let mut acc = S::zero();
                        for e in 0..elems {
                            let i = index(e, c);
                            acc += dout[i] * xhat[i];
                        }
                        dg[c] += acc;
                    }
                }
                {
                    let db = grad_buf(lo, vals, *beta);
                    for c in 0..channels {
                        let mut acc = S::zero();
                        for e in 0..elems {
                            acc += dout[index(e, c)];
                        }
                        db[c] += acc;
                    }
                }
            }
            Op::Activation { kind, x, out } => {
                let xd = vals[*x].data();
                let yd = vals[*out].data();
                let slope = S::from_f64(LEAKY_SLOPE);
                let dx = grad_buf(lo, vals, *x);
                for i in 0..xd.len() {
                    let f = match kind {
                        ActKind::Relu => {
                            if xd[i] > S::zero() {
                                S::one()
                            } else {
                                S::zero()
                            }
                        }
                        ActKind::LeakyRelu => {
                            if xd[i] > S::zero() {
                                S::one()
                            } else {
                                slope
                            }
                        }
                        ActKind::Sigmoid => yd[i] * (S::one() - yd[i]),
                    };
                    dx[i] += dout[i] * f;
                }
            }
            Op::SoftmaxRows { x, out } => {
                let (n, k) = (vals[*x].rows(), vals[*x].cols());
                let yd = vals[*out].data();
                let dx = grad_buf(lo, vals, *x);
                for row in 0..n {
                    let y = &yd[row * k..(row + 1) * k];
                    let d = &dout[row * k..(row + 1) * k];
                    let mut dot = S::zero();
                    for (yv, dv) in y.iter().zip(d) {
                        dot += *yv * *dv;
                    }
                    for col in 0..k {
                        dx[row * k + col] += y[col] * (d[col] - dot);
                    }
                }
            }
            Op::SegmentedMax { x, out: _, argmax } => {
                let c = vals[*x].cols();
                let dx = grad_buf(lo, vals, *x);
                for (slot, &arg) in argmax.iter().enumerate() {
                    if arg != u32::MAX {
                        dx[arg as usize * c + slot % c] += dout[slot];
                    }
                }
            }
            Op::SegmentedMean {
                x,
                out: _,
                seg,
                counts,
            } => {
                let c = vals[*x].cols();
                let dx = grad_buf(lo, vals, *x);
                for (row, &s) in seg.iter().enumerate() {
                    let inv = S::one() / S::from_f64(counts[s as usize] as f64);
                    let drow = &dout[s as usize * c..(s as usize + 1) * c];
                    for (g, dv) in dx[row * c..(row + 1) * c].iter_mut().zip(drow) {
                        *g += *dv * inv;
                    }
                }
            }
            Op::ScatterBilinear {
                x,
                out: _,
                contribs,
                scale,
            } => {
                let c = vals[*x].cols();
                let dx = grad_buf(lo, vals, *x);
                for &(p, cell, w) in contribs {
                    let f = w * scale[cell as usize];
                    let drow = &dout[cell as usize * c..(cell as usize + 1) * c];
                    for (g, dv) in dx[p as usize * c..(p as usize + 1) * c]
                        .iter_mut()
                        .zip(drow)
                    {
                        *g += f * *dv;
                    }
                }
            }
            Op::GatherRows { x, out: _, idx } => {
                let c = vals[*x].cols();
                let dx = grad_buf(lo, vals, *x);
                for (row, &i) in idx.iter().enumerate() {
                    let drow = &dout[row * c..(row + 1) * c];
                    for (g, dv) in dx[i as usize * c..(i as usize + 1) * c]
                        .iter_mut()
                        .zip(drow)
                    {
                        *g += *dv;
                    }
                }
            }
            Op::ScaleRows { x, out: _, w } => {
                let c = vals[*x].cols();
                let dx = grad_buf(lo, vals, *x);
                for (row, &wv) in w.iter().enumerate() {
                    for (g, dv) in dx[row * c..(row + 1) * c]
                        .iter_mut()
                        .zip(&dout[row * c..(row + 1) * c])
                    {
                        *g += wv * *dv;
                    }
                }
            }
            Op::WeightedGather {
                x,
                out: _,
                idx,
                w,
                k,
            } => {
                let c = vals[*x].cols();
                let rows = idx.len() / k;
                let dx = grad_buf(lo, vals, *x);
                for row in 0..rows {
                    let drow = &dout[row * c..(row + 1) * c];
                    for t in 0..*k {
                        let i = idx[row * k + t] as usize;
                        let wv = w[row * k + t];
                        for (g, dv) in dx[i * c..(i + 1) * c].iter_mut().zip(drow) {
                            *g += wv * *dv;
                        }
                    }
                }
            }
            Op::ConcatCols { parts, out } => {
                let width = vals[*out].cols();
                let n = vals[*out].rows();
                let mut off = 0;
                for &p in parts {
                    let c = vals[p].cols();
                    let dp = grad_buf(lo, vals, p);
                    for row in 0..n {
                        let drow = &dout[row * width + off..row * width + off + c];
                        for (g, dv) in dp[row * c..(row + 1) * c].iter_mut().zip(drow) {
                            *g += *dv;
                        }
                    }
                    off += c;
                }
            }
            Op::Add { a, b, out: _ } => {
                for (g, dv) in grad_buf(lo, vals, *a).iter_mut().zip(dout) {
                    *g += *dv;
                }
                for (g, dv) in grad_buf(lo, vals, *b).iter_mut().zip(dout) {
                    *g += *dv;
                }
            }
            Op::ScaleChannels { x, s, out: _ } => {
                let xs = vals[*x].shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let sd = vals[*s].data();
                let xd = vals[*x].data();
                {
                    let dx = grad_buf(lo, vals, *x);
                    for ci in 0..c {
                        let sv = sd[ci];
                        for (g, dv) in dx[ci * hw..(ci + 1) * hw]
                            .iter_mut()
                            .zip(&dout[ci * hw..(ci + 1) * hw])
                        {
                            *g += sv * *dv;
                        }
                    }
                }
                {
                    let ds = grad_buf(lo, vals, *s);
                    for ci in 0..c {
                        let mut acc = S::zero();
                        for (xv, dv) in xd[ci * hw..(ci + 1) * hw]
                            .iter()
                            .zip(&dout[ci * hw..(ci + 1) * hw])
                        {
                            acc += *xv * *dv;
                        }
                        ds[ci] += acc;
                    }
                }
            }
            Op::GlobalAvgPool { x, out: _ } => {
                let xs = vals[*x].shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let inv = S::one() / S::from_f64(hw as f64);
                let dx = grad_buf(lo, vals, *x);
                for ci in 0..c {
                    let dv = dout[ci] * inv;
                    for g in &mut dx[ci * hw..(ci + 1) * hw] {
                        *g += dv;
                    }
                }
            }
            Op::ColMax { x, out: _, argmax } => {
                let c = vals[*x].cols();
                let dx = grad_buf(lo, vals, *x);
                for (col, &row) in argmax.iter().enumerate() {
                    dx[row as usize * c + col] += dout[col];
                }
            }
            Op::BroadcastRows { x, out: _, n } => {
                let c = vals[*x].cols();
                let dx = grad_buf(lo, vals, *x);
                for row in 0..*n {
                    for (g, dv) in dx.iter_mut().zip(&dout[row * c..(row + 1) * c]) {
                        *g += *dv;
                    }
                }
            }
            Op::WeightedSumRows { w, feats, out: _ } => {
                let (n, b) = (vals[*w].rows(), vals[*w].cols());
                let c = vals[feats[0]].cols();
                let wd = vals[*w].data();
                {
                    let dw = grad_buf(lo, vals, *w);
                    for (bi, &f) in feats.iter().enumerate() {
                        let fd = vals[f].data();
                        for row in 0..n {
                            let mut acc = S::zero();
                            for (fv, dv) in fd[row * c..(row + 1) * c]
                                .iter()
                                .zip(&dout[row * c..(row + 1) * c])
                            {
                                acc += *fv * *dv;
                            }
                            dw[row * b + bi] += acc;
                        }
                    }
                }
                for (bi, &f) in feats.iter().enumerate() {
                    let df = grad_buf(lo, vals, f);
                    for row in 0..n {
                        let wv = wd[row * b + bi];
                        for (g, dv) in df[row * c..(row + 1) * c]
                            .iter_mut()
                            .zip(&dout[row * c..(row + 1) * c])
                        {
                            *g += wv * *dv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                out: _,
                labels,
                probs,
            } => {
                let k = vals[*logits].cols();
                let n = labels.len();
                let inv_n = S::one() / S::from_f64(n as f64);
                let d = dout[0];
                let dx = grad_buf(lo, vals, *logits);
                for (row, &label) in labels.iter().enumerate() {
                    for col in 0..k {
                        let indicator = if col == label as usize {
                            S::one()
                        } else {
                            S::zero()
                        };
                        dx[row * k + col] += d * (probs[row * k + col] - indicator) * inv_n;
                    }
                }
            }
            Op::MeanScalars { xs, out: _ } => {
                let inv = S::one() / S::from_f64(xs.len() as f64);
                let d = dout[0] * inv;
                for &x in xs {
                    grad_buf(lo, vals, x)[0] += d;
                }
            }
            Op::SumAll { x, out: _ } => {
                let d = dout[0];
                for g in grad_buf(lo, vals, *x).iter_mut() {
                    *g += d;
                }
            }
            Op::HwcToChw { x, out: _, h, w, c } => {
                let hw = h * w;
                let dx = grad_buf(lo, vals, *x);
                for cell in 0..hw {
                    for col in 0..*c {
                        dx[cell * c + col] += dout[col * hw + cell];
                    }
                }
            }
            Op::ChwToHwc { x, out: _, h, w, c } => {
                let hw = h * w;
                let dx = grad_buf(lo, vals, *x);
                for cell in 0..hw {
                    for col in 0..*c {
                        dx[col * hw + cell] += dout[cell * c + col];
                    }
                }
            }
            Op::BadIdentity { x, out: _ } => {
                let wrong = S::from_f64(1.1);
                for (g, dv) in grad_buf(lo, vals, *x).iter_mut().zip(dout) {
                    *g += wrong * *dv;
                }
            }
        }
    }
}

/// Fetch (allocating on first touch) the gradient buffer for `id`.
fn grad_buf<'a, S: Scalar>(
    slots: &'a mut [Option<Tensor<S>>],
    vals: &[Tensor<S>],
    id: ValId,
) -> &'a mut [S] {
    slots[id]
        .get_or_insert_with(|| Tensor::zeros(vals[id].shape().to_vec()))
        .data_mut()
}

/// Batch norm forward that also returns what the backward rule needs.
fn batchnorm_full<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    stats: &mut BnStats<S>,
    layout: BnLayout,
    mode: Mode,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    let (channels, elems) = kernels::bn_dims(x, layout)?;
    if gamma.len() != channels || beta.len() != channels || stats.mean.len() != channels {
        return Err(Error::Dimension(format!(
            "batchnorm: {} channels vs gamma {} beta {} stats {}",
            channels,
            gamma.len(),
            beta.len(),
            stats.mean.len()
        )));
    }
    if elems == 0 {
        return Err(Error::Degenerate(
            "batchnorm: zero elements per channel".into(),
        ));
    }
    let eps = S::from_f64(kernels::BN_EPS);
    let momentum = S::from_f64(kernels::BN_MOMENTUM);
    let inv_m = S::one() / S::from_f64(elems as f64);
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_stds = vec![S::zero(); channels];
    let xd = x.data();
    let index = |e: usize, c: usize| -> usize {
        match layout {
            BnLayout::ChannelsLast => e * channels + c,
            BnLayout::ChannelsFirst => c * elems + e,
        }
    };
    for c in 0..channels {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = S::zero();
                for e in 0..elems {
                    sum += xd[index(e, c)];
                }
                let mean = sum * inv_m;
                let mut sq = S::zero();
                for e in 0..elems {
                    let d = xd[index(e, c)] - mean;
                    sq += d * d;
                }
                let var = sq * inv_m;
                let m = stats.mean.data_mut();
                m[c] = (S::one() - momentum) * m[c] + momentum * mean;
                let v = stats.var.data_mut();
                v[c] = (S::one() - momentum) * v[c] + momentum * var;
                (mean, var)
            }
            Mode::Eval => (stats.mean.data()[c], stats.var.data()[c]),
        };
        let inv_std = S::one() / (var + eps).sqrt();
        inv_stds[c] = inv_std;
        let g = gamma.data()[c];
        let be = beta.data()[c];
        let od = out.data_mut();
        for e in 0..elems {
            let i = index(e, c);
            let xh = (xd[i] - mean) * inv_std;
            xhat[i] = xh;
            od[i] = xh * g + be;
        }
    }
    Ok((out, xhat, inv_stds))
}
