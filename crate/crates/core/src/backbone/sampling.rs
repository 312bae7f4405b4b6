//! Point sampling, neighborhood grouping, and interpolation used by the
//! encoder/decoder stages.

use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tensor};

fn dist2<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> f64 {
    let dx = a[0].as_f64() - b[0].as_f64();
    let dy = a[1].as_f64() - b[1].as_f64();
    let dz = a[2].as_f64() - b[2].as_f64();
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min farthest point sampling; `start` picks the first index.
pub fn farthest_point_sampling<S: Scalar>(
    coords: &[[S; 3]],
    m: usize,
    start: usize,
) -> Result<Vec<u32>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(Error::Sampling(format!(
            "cannot sample {m} of {n} points"
        )));
    }
    if start >= n {
        return Err(Error::Index(format!("start {start} of {n}")));
    }
    let mut picked = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = start;
    picked.push(cur as u32);
    for _ in 1..m {
        let mut far = 0usize;
        let mut far_d = f64::NEG_INFINITY;
        for (i, c) in coords.iter().enumerate() {
            let d = dist2(c, &coords[cur]);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far_d {
                far_d = best[i];
                far = i;
            }
        }
        cur = far;
        picked.push(cur as u32);
    }
    Ok(picked)
}

/// Up to `nsample` point indices within `radius` of each center, first-found
/// order. Short groups repeat their first member; a center with no points in
/// range falls back to its nearest point.
pub fn ball_query<S: Scalar>(
    coords: &[[S; 3]],
    centers: &[[S; 3]],
    radius: f64,
    nsample: usize,
) -> Result<Vec<u32>> {
    if coords.is_empty() {
        return Err(Error::Data("ball query over an empty point set".into()));
    }
    if radius <= 0.0 || nsample == 0 {
        return Err(Error::Config(format!(
            "ball query radius {radius} nsample {nsample}"
        )));
    }
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len() * nsample);
    for center in centers {
        let mut found = 0usize;
        let base = out.len();
        for (i, c) in coords.iter().enumerate() {
            if dist2(c, center) <= r2 {
                out.push(i as u32);
                found += 1;
                if found == nsample {
                    break;
                }
            }
        }
        if found == 0 {
            let nearest = coords
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    dist2(a, center)
                        .partial_cmp(&dist2(b, center))
                        .expect("finite distances")
                })
                .map(|(i, _)| i as u32)
                .expect("nonempty point set");
            out.push(nearest);
            found = 1;
        }
        let first = out[base];
        for _ in found..nsample {
            out.push(first);
        }
    }
    Ok(out)
}

/// Indices and normalized inverse-distance weights of the (up to) three
/// nearest sources per destination, laid out three per row. Rows with fewer
/// than three sources repeat the nearest index with zero weight.
pub fn three_nn_weights<S: Scalar>(
    src: &[[S; 3]],
    dst: &[[S; 3]],
) -> Result<(Vec<u32>, Vec<S>)> {
    if src.is_empty() {
        return Err(Error::Data("interpolation from an empty source set".into()));
    }
    let k = 3usize.min(src.len());
    let mut idx = Vec::with_capacity(dst.len() * 3);
    let mut w = Vec::with_capacity(dst.len() * 3);
    for d in dst {
        let mut nearest: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        for (i, s) in src.iter().enumerate() {
            let dd = dist2(s, d);
            if nearest.len() < k {
                nearest.push((i, dd));
                nearest.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"));
            } else if dd < nearest[k - 1].1 {
                nearest[k - 1] = (i, dd);
                nearest.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"));
            }
        }
        let raw: Vec<f64> = nearest
            .iter()
            .map(|(_, dd)| 1.0 / (dd.sqrt() + 1e-8))
            .collect();
        let total: f64 = raw.iter().sum();
        for t in 0..3 {
            if t < k {
                idx.push(nearest[t].0 as u32);
                w.push(S::from_f64(raw[t] / total));
            } else {
                idx.push(nearest[0].0 as u32);
                w.push(S::zero());
            }
        }
    }
    Ok((idx, w))
}

/// Inverse-distance interpolation of `src_feats` onto `dst` positions.
pub fn three_nn_interpolate<S: Scalar>(
    src: &[[S; 3]],
    src_feats: &Tensor<S>,
    dst: &[[S; 3]],
) -> Result<Tensor<S>> {
    if src_feats.rows() != src.len() {
        return Err(Error::Consistency(format!(
            "{} source coords vs {} feature rows",
            src.len(),
            src_feats.rows()
        )));
    }
    let (idx, w) = three_nn_weights(src, dst)?;
    let c = src_feats.cols();
    let mut out = Tensor::zeros(vec![dst.len(), c]);
    for row in 0..dst.len() {
        let orow = &mut out.data_mut()[row * c..(row + 1) * c];
        for t in 0..3 {
            let s = idx[row * 3 + t] as usize;
            let wv = w[row * 3 + t];
            for (o, &v) in orow.iter_mut().zip(src_feats.row(s)) {
                *o += wv * v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn fps_collinear_picks_extremes() {
        let idx = farthest_point_sampling(&line(4), 2, 0).unwrap();
        assert_eq!(idx, vec![0, 3]);
    }

    #[test]
    fn fps_all_points_is_greedy_order() {
        let idx = farthest_point_sampling(&line(4), 4, 0).unwrap();
        assert_eq!(idx.len(), 4);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 3);
    }

    #[test]
    fn fps_rejects_oversampling() {
        assert!(farthest_point_sampling(&line(3), 4, 0).is_err());
    }

    #[test]
    fn fps_matches_exhaustive_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let got = farthest_point_sampling(&pts, 5, 0).unwrap();

        // Independent recompute: at each step pick the point maximizing the
        // min distance to the picked set.
        let mut picked = vec![0usize];
        for _ in 1..5 {
            let (best, _) = pts
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let d = picked
                        .iter()
                        .map(|&q| super::dist2(p, &pts[q]))
                        .fold(f64::INFINITY, f64::min);
                    (i, d)
                })
                .fold((0usize, f64::NEG_INFINITY), |acc, (i, d)| {
                    if d > acc.1 {
                        (i, d)
                    } else {
                        acc
                    }
                });
            picked.push(best);
        }
        assert_eq!(got, picked.iter().map(|&i| i as u32).collect::<Vec<_>>());
    }

    #[test]
    fn ball_query_padding_rules() {
        let pts = vec![[0.0f64, 0.0, 0.0], [0.05, 0.0, 0.0], [0.5, 0.0, 0.0]];
        // Center sees only the first point: index 0 repeated.
        let idx = ball_query(&pts, &[[0.0, 0.0, 0.0]], 0.01, 4).unwrap();
        assert_eq!(idx, vec![0, 0, 0, 0]);
        // Radius 0.1 around origin: points at 0 and 0.05 qualify, 0.5 not.
        let idx = ball_query(&pts, &[[0.0, 0.0, 0.0]], 0.1, 2).unwrap();
        assert_eq!(idx, vec![0, 1]);
        // No point in range: the nearest one is used.
        let idx = ball_query(&pts, &[[5.0, 0.0, 0.0]], 0.1, 2).unwrap();
        assert_eq!(idx, vec![2, 2]);
    }

    #[test]
    fn degenerate_grouping_sees_every_point() {
        // Radius far beyond the extent with nsample = N: every center's
        // group is the whole set in index order, so a max over the group
        // equals the global max.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[f64; 3]> = (0..9)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let groups = ball_query(&pts, &pts, 100.0, 9).unwrap();
        for center in 0..9 {
            let group = &groups[center * 9..(center + 1) * 9];
            assert_eq!(group, (0..9u32).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn ball_query_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..60)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let centers: Vec<[f64; 3]> = (0..10)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let nsample = 8;
        let radius = 0.3;
        let got = ball_query(&pts, &centers, radius, nsample).unwrap();
        for (ci, center) in centers.iter().enumerate() {
            let want: Vec<u32> = pts
                .iter()
                .enumerate()
                .filter(|(_, p)| super::dist2(p, center) <= radius * radius)
                .map(|(i, _)| i as u32)
                .take(nsample)
                .collect();
            let group = &got[ci * nsample..(ci + 1) * nsample];
            if want.is_empty() {
                assert!(group.iter().all(|&g| g == group[0]));
            } else {
                assert_eq!(&group[..want.len()], &want[..]);
                for &g in &group[want.len()..] {
                    assert_eq!(g, want[0]);
                }
            }
        }
    }

    #[test]
    fn interpolation_at_source_point_returns_its_feature() {
        let src = vec![[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let feats = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = three_nn_interpolate(&src, &feats, &[[1.0, 0.0, 0.0]]).unwrap();
        assert!((out.row(0)[0] - 3.0).abs() < 1e-6);
        assert!((out.row(0)[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn interpolation_midpoint_of_two_sources() {
        let src = vec![[0.0f64, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let feats = Tensor::from_rows(&[vec![10.0], vec![20.0]]).unwrap();
        let out = three_nn_interpolate(&src, &feats, &[[1.0, 0.0, 0.0]]).unwrap();
        assert!((out.row(0)[0] - 15.0).abs() < 1e-6);
    }

    #[test]
    fn interpolation_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src: Vec<[f64; 3]> = (0..12)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let feats = Tensor::<f64>::randn(vec![12, 4], 1.0, &mut rng);
        let dst: Vec<[f64; 3]> = (0..7)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let out = three_nn_interpolate(&src, &feats, &dst).unwrap();
        for (di, d) in dst.iter().enumerate() {
            let mut ds: Vec<(usize, f64)> = src
                .iter()
                .enumerate()
                .map(|(i, s)| (i, super::dist2(s, d).sqrt()))
                .collect();
            ds.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            let raw: Vec<f64> = ds[..3].iter().map(|(_, d)| 1.0 / (d + 1e-8)).collect();
            let z: f64 = raw.iter().sum();
            for c in 0..4 {
                let want: f64 = (0..3)
                    .map(|t| raw[t] / z * feats.row(ds[t].0)[c])
                    .sum();
                assert!((out.row(di)[c] - want).abs() < 1e-9);
            }
        }
    }
}
