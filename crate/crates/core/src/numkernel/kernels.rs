//! Forward implementations of the dense numeric kernels. The tape in
//! [`super::tape`] wraps these with backward rules; tests use them directly
//! as the plain-loop reference surface.

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Train/eval switch for batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Elementwise activation kinds. The leaky slope is fixed at 0.1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    LeakyRelu,
    Sigmoid,
}

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which axis of the tensor carries channels for batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnLayout {
    /// `N x C`: rows are elements, the last dimension is channels.
    ChannelsLast,
    /// `C x H x W`: the first dimension is channels, `H*W` elements each.
    ChannelsFirst,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

impl<S: Scalar> BnStats<S> {
    pub fn identity(channels: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::filled(vec![channels], S::one()),
        }
    }
}

/// out[n, :] = x[n, :] . W + b
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, cin) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != cin {
        return Err(Error::Dimension(format!(
            "linear: x cols {} vs W shape {:?}",
            cin,
            w.shape()
        )));
    }
    let cout = w.shape()[1];
    if b.len() != cout {
        return Err(Error::Dimension(format!(
            "linear: bias len {} vs W cols {}",
            b.len(),
            cout
        )));
    }
    let mut out = Tensor::zeros(vec![n, cout]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for row in 0..n {
        let orow = &mut od[row * cout..(row + 1) * cout];
        orow.copy_from_slice(bd);
        for ci in 0..cin {
            let xv = xd[row * cin + ci];
            let wrow = &wd[ci * cout..(ci + 1) * cout];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += xv * *wv;
            }
        }
    }
    Ok(out)
}

/// 3x3 cross-correlation, stride 1, zero padding 1; spatial extents preserved.
///
/// For each output site the accumulation starts from the bias and adds terms
/// in `(ci, ki, kj)` order, which is the order the naive nested-loop oracle
/// uses; the two therefore agree bit-for-bit in f64.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, k: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 3 {
        return Err(Error::Dimension(format!("conv2d: input shape {:?}", xs)));
    }
    if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
        return Err(Error::Dimension(format!("conv2d: kernel shape {:?}", ks)));
    }
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let cout = ks[0];
    if ks[1] != cin {
        return Err(Error::Dimension(format!(
            "conv2d: kernel expects {} input channels, map has {}",
            ks[1], cin
        )));
    }
    if b.len() != cout {
        return Err(Error::Dimension("conv2d: bias length".into()));
    }
    let mut out = Tensor::zeros(vec![cout, h, w]);
    let (xd, kd, bd) = (x.data(), k.data(), b.data());
    let od = out.data_mut();
    for co in 0..cout {
        let oplane = &mut od[co * h * w..(co + 1) * h * w];
        for v in oplane.iter_mut() {
            *v = bd[co];
        }
        for ci in 0..cin {
            let xplane = &xd[ci * h * w..(ci + 1) * h * w];
            for ki in 0..3usize {
                for kj in 0..3usize {
                    let kv = kd[((co * cin + ci) * 3 + ki) * 3 + kj];
                    if kv == S::zero() {
                        continue;
                    }
                    let di = ki as isize - 1;
                    let dj = kj as isize - 1;
                    for i in 0..h as isize {
                        let src_i = i + di;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        let orow = i as usize * w;
                        let xrow = src_i as usize * w;
                        let j_lo = (-dj).max(0) as usize;
                        let j_hi = (w as isize).min(w as isize - dj) as usize;
                        for j in j_lo..j_hi {
                            oplane[orow + j] += xplane[xrow + (j as isize + dj) as usize] * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel batch normalization. Train mode normalizes with the batch
/// statistics of `x` and folds them into `stats` with momentum 0.1; eval mode
/// normalizes with `stats` as-is.
pub fn batchnorm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    stats: &mut BnStats<S>,
    layout: BnLayout,
    mode: Mode,
) -> Result<Tensor<S>> {
    let (channels, elems) = bn_dims(x, layout)?;
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
    let eps = S::from_f64(BN_EPS);
    let momentum = S::from_f64(BN_MOMENTUM);
    let inv_m = S::one() / S::from_f64(elems as f64);
    let mut out = Tensor::zeros(x.shape().to_vec());

    for c in 0..channels {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = S::zero();
                for_channel(x, layout, c, |v| sum += v);
                let mean = sum * inv_m;
                let mut sq = S::zero();
                for_channel(x, layout, c, |v| {
                    let d = v - mean;
                    sq += d * d;
                });
                let var = sq * inv_m;
                let m = stats.mean.data_mut();
                m[c] = (S::one() - momentum) * m[c] + momentum * mean;
                let vv = stats.var.data_mut();
                vv[c] = (S::one() - momentum) * vv[c] + momentum * var;
                (mean, var)
            }
            Mode::Eval => (stats.mean.data()[c], stats.var.data()[c]),
        };
        let inv_std = S::one() / (var + eps).sqrt();
        let g = gamma.data()[c];
        let be = beta.data()[c];
        write_channel(x, &mut out, layout, c, |v| (v - mean) * inv_std * g + be);
    }
    Ok(out)
}

pub(crate) fn bn_dims<S: Scalar>(x: &Tensor<S>, layout: BnLayout) -> Result<(usize, usize)> {
    match layout {
        BnLayout::ChannelsLast => {
            let c = x.cols();
            let n = x.rows();
            if c == 0 {
                return Err(Error::Dimension("batchnorm: zero channels".into()));
            }
            Ok((c, n))
        }
        BnLayout::ChannelsFirst => {
            let s = x.shape();
            if s.len() != 3 {
                return Err(Error::Dimension(format!(
                    "batchnorm: planar layout expects C x H x W, got {:?}",
                    s
                )));
            }
            Ok((s[0], s[1] * s[2]))
        }
    }
}

fn for_channel<S: Scalar>(x: &Tensor<S>, layout: BnLayout, c: usize, mut f: impl FnMut(S)) {
    match layout {
        BnLayout::ChannelsLast => {
            let (n, cols) = (x.rows(), x.cols());
            let d = x.data();
            for row in 0..n {
                f(d[row * cols + c]);
            }
        }
        BnLayout::ChannelsFirst => {
            let hw = x.shape()[1] * x.shape()[2];
            for &v in &x.data()[c * hw..(c + 1) * hw] {
                f(v);
            }
        }
    }
}

fn write_channel<S: Scalar>(
    x: &Tensor<S>,
    out: &mut Tensor<S>,
    layout: BnLayout,
    c: usize,
    f: impl Fn(S) -> S,
) {
    match layout {
        BnLayout::ChannelsLast => {
            let (n, cols) = (x.rows(), x.cols());
            let xd = x.data();
            let od = out.data_mut();
            for row in 0..n {
                od[row * cols + c] = f(xd[row * cols + c]);
            }
        }
        BnLayout::ChannelsFirst => {
            let hw = x.shape()[1] * x.shape()[2];
            let xd = &x.data()[c * hw..(c + 1) * hw];
            let od = &mut out.data_mut()[c * hw..(c + 1) * hw];
            for (o, &v) in od.iter_mut().zip(xd) {
                *o = f(v);
            }
        }
    }
}

pub fn activation<S: Scalar>(kind: ActKind, x: &Tensor<S>) -> Tensor<S> {
    let slope = S::from_f64(LEAKY_SLOPE);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = match kind {
            ActKind::Relu => {
                if *v > S::zero() {
                    *v
                } else {
                    S::zero()
                }
            }
            ActKind::LeakyRelu => {
                if *v > S::zero() {
                    *v
                } else {
                    *v * slope
                }
            }
            ActKind::Sigmoid => S::one() / (S::one() + (-*v).exp()),
        };
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, k) = (x.rows(), x.cols());
    if k == 0 {
        return Err(Error::Dimension("softmax_rows: empty rows".into()));
    }
    let mut out = Tensor::zeros(vec![n, k]);
    let xd = x.data();
    let od = out.data_mut();
    for r in 0..n {
        let row = &xd[r * k..(r + 1) * k];
        let m = row.iter().fold(row[0], |m, &v| if v > m { v } else { m });
        let orow = &mut od[r * k..(r + 1) * k];
        let mut sum = S::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Per-segment column maxima. Empty segments produce zero rows; the returned
/// argmax table holds the winning row per `(segment, channel)` with
/// `u32::MAX` marking empty slots (their gradient routes nowhere).
pub fn segmented_max<S: Scalar>(
    x: &Tensor<S>,
    segment_ids: &[u32],
    segments: usize,
) -> Result<(Tensor<S>, Vec<u32>)> {
    let (n, c) = (x.rows(), x.cols());
    if segment_ids.len() != n {
        return Err(Error::Dimension(format!(
            "segmented_max: {} rows vs {} segment ids",
            n,
            segment_ids.len()
        )));
    }
    if let Some(&bad) = segment_ids.iter().find(|&&s| s as usize >= segments) {
        return Err(Error::Index(format!(
            "segment id {} with {} segments",
            bad, segments
        )));
    }
    let mut out = Tensor::zeros(vec![segments, c]);
    let mut argmax = vec![u32::MAX; segments * c];
    let xd = x.data();
    let od = out.data_mut();
    for row in 0..n {
        let s = segment_ids[row] as usize;
        for col in 0..c {
            let v = xd[row * c + col];
            let slot = s * c + col;
            if argmax[slot] == u32::MAX || v > od[slot] {
                od[slot] = v;
                argmax[slot] = row as u32;
            }
        }
    }
    Ok((out, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weights() {
        let x = t2(&[vec![1.0, 2.0]]);
        let eye = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b0 = Tensor::zeros(vec![2]);
        assert_eq!(linear(&x, &eye, &b0).unwrap().data(), &[1.0, 2.0]);

        let wz = Tensor::zeros(vec![2, 2]);
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(linear(&x, &wz, &b).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_hand_matmul() {
        let x = t2(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        let w = t2(&[vec![1.0], vec![1.0]]);
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_dimension_error() {
        let x = t2(&[vec![1.0, 2.0]]);
        let w = Tensor::<f64>::zeros(vec![3, 2]);
        let b = Tensor::<f64>::zeros(vec![2]);
        assert!(matches!(linear(&x, &w, &b), Err(Error::Dimension(_))));
    }

    /// Independent six-loop convolution used as the conv2d oracle.
    pub(crate) fn conv2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = k.shape()[0];
        let mut out = Tensor::zeros(vec![cout, h, w]);
        for co in 0..cout {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ki in 0..3isize {
                            for kj in 0..3isize {
                                let (si, sj) = (i + ki - 1, j + kj - 1);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                acc += x.data()[(ci * h + si as usize) * w + sj as usize]
                                    * k.data()
                                        [((co * cin + ci) * 3 + ki as usize) * 3 + kj as usize];
                            }
                        }
                    }
                    out.data_mut()[(co * h + i as usize) * w + j as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
        k.data_mut()[4] = 1.0; // center tap
        let b = Tensor::zeros(vec![1]);
        assert_eq!(conv2d(&x, &k, &b).unwrap().data(), x.data());
    }

    #[test]
    fn conv2d_all_ones_padding_arithmetic() {
        let x = Tensor::filled(vec![1, 3, 3], 1.0f64);
        let k = Tensor::filled(vec![1, 1, 3, 3], 1.0f64);
        let b = Tensor::zeros(vec![1]);
        let out = conv2d(&x, &k, &b).unwrap();
        assert_eq!(out.data()[4], 9.0); // center sees the full window
        assert_eq!(out.data()[0], 4.0); // corner sees a 2x2 window
    }

    #[test]
    fn conv2d_matches_naive_oracle_bit_for_bit() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for (cin, cout, h, w) in [(2usize, 2usize, 4usize, 4usize), (4, 3, 8, 8), (3, 4, 5, 7)] {
            let x = Tensor::<f64>::randn(vec![cin, h, w], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(vec![cout, cin, 3, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(vec![cout], 1.0, &mut rng);
            let fast = conv2d(&x, &k, &b).unwrap();
            let slow = conv2d_oracle(&x, &k, &b);
            assert_eq!(fast.data(), slow.data(), "cin={cin} cout={cout} {h}x{w}");
        }
    }

    #[test]
    fn batchnorm_passthrough_and_constant() {
        // Zero-mean unit-variance input stays put (up to epsilon).
        let x = t2(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let gamma = Tensor::filled(vec![2], 1.0f64);
        let beta = Tensor::zeros(vec![2]);
        let mut st = BnStats::identity(2);
        let out = batchnorm(&x, &gamma, &beta, &mut st, BnLayout::ChannelsLast, Mode::Train)
            .unwrap();
        for (o, x) in out.data().iter().zip(x.data()) {
            assert!((o - x).abs() < 1e-4, "{o} vs {x}");
        }

        // gamma = 0, beta = c collapses everything to c.
        let g0 = Tensor::zeros(vec![2]);
        let bc = Tensor::filled(vec![2], 7.5f64);
        let out = batchnorm(&x, &g0, &bc, &mut st, BnLayout::ChannelsLast, Mode::Train)
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 7.5));
    }

    #[test]
    fn batchnorm_matches_two_pass_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(vec![8, 4], 2.0, &mut rng);
        let gamma = Tensor::<f64>::uniform(vec![4], 0.5, 1.5, &mut rng);
        let beta = Tensor::<f64>::uniform(vec![4], -0.5, 0.5, &mut rng);
        let mut st = BnStats::identity(4);
        let out = batchnorm(&x, &gamma, &beta, &mut st, BnLayout::ChannelsLast, Mode::Train)
            .unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..8).map(|r| x.data()[r * 4 + c]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            for r in 0..8 {
                let want =
                    (col[r] - mean) / (var + BN_EPS).sqrt() * gamma.data()[c] + beta.data()[c];
                assert!((out.data()[r * 4 + c] - want).abs() < 1e-6);
            }
            // Running stats moved toward the batch stats with momentum 0.1.
            assert!((st.mean.data()[c] - 0.1 * mean).abs() < 1e-12);
            assert!((st.var.data()[c] - (0.9 + 0.1 * var)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_zero_elements_is_degenerate() {
        let x = Tensor::<f64>::zeros(vec![0, 3]);
        let gamma = Tensor::filled(vec![3], 1.0f64);
        let beta = Tensor::zeros(vec![3]);
        let mut st = BnStats::identity(3);
        assert!(matches!(
            batchnorm(&x, &gamma, &beta, &mut st, BnLayout::ChannelsLast, Mode::Train),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn activation_definitions() {
        let x = Tensor::new(vec![3], vec![-1.0, 2.0, -2.0]).unwrap();
        let r = activation(ActKind::Relu, &x);
        assert_eq!(r.data(), &[0.0, 2.0, 0.0]);
        let l: Tensor<f64> = activation(ActKind::LeakyRelu, &x);
        assert!((l.data()[2] - (-0.2)).abs() < 1e-12);
        let s = activation(ActKind::Sigmoid, &Tensor::scalar(0.0f64));
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetry_stability_and_formula() {
        let eq = softmax_rows(&t2(&[vec![3.0; 4]])).unwrap();
        for &v in eq.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }

        let big = softmax_rows(&t2(&[vec![1000.0, 0.0]])).unwrap();
        assert!(big.validate().is_ok());
        assert!(big.data()[0] > 0.999999 && big.data()[1] < 1e-6);

        let row = [1.0f64, 2.0, 3.0];
        let out = softmax_rows(&t2(&[row.to_vec()])).unwrap();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (o, v) in out.data().iter().zip(&row) {
            assert!((o - v.exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn segmented_max_cases() {
        let x = t2(&[vec![1.0, 5.0], vec![4.0, 2.0]]);
        let (out, arg) = segmented_max(&x, &[0, 0], 1).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);

        // Segment 1 has no members: zero-filled, argmax sentinel.
        let (out, arg) = segmented_max(&x, &[0, 0], 2).unwrap();
        assert_eq!(&out.data()[2..], &[0.0, 0.0]);
        assert_eq!(&arg[2..], &[u32::MAX, u32::MAX]);

        assert!(matches!(
            segmented_max(&x, &[0, 3], 2),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn segmented_max_matches_scan_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(vec![10, 3], 1.0, &mut rng);
        let ids: Vec<u32> = (0..10).map(|i| (i * 7 % 3) as u32).collect();
        let (out, _) = segmented_max(&x, &ids, 3).unwrap();
        for s in 0..3u32 {
            for c in 0..3 {
                let best = (0..10)
                    .filter(|&r| ids[r] == s)
                    .map(|r| x.data()[r * 3 + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(out.data()[s as usize * 3 + c], best);
            }
        }
    }
}
