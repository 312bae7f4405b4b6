//! Data ingestion (text point files), the two block-sampling protocols, a
//! synthetic labeled-scene generator for desk-scale training, and
//! segmentation metrics.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tensor};
use crate::pointgrid::PointCloud;

/// Full-room point cloud with per-point labels and known extent.
#[derive(Debug, Clone)]
pub struct Scene<S> {
    pub cloud: PointCloud<S>,
    /// Room size in meters per axis.
    pub extent: [f64; 3],
    /// Minimum corner of the room.
    pub origin: [f64; 3],
    pub class_count: usize,
}

impl<S: Scalar> Scene<S> {
    pub fn from_cloud(cloud: PointCloud<S>, class_count: usize) -> Result<Self> {
        if let Some(labels) = &cloud.labels {
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
                return Err(Error::Data(format!(
                    "label {bad} with {class_count} classes"
                )));
            }
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in &cloud.coords {
            for k in 0..3 {
                lo[k] = lo[k].min(c[k].as_f64());
                hi[k] = hi[k].max(c[k].as_f64());
            }
        }
        let extent = [
            (hi[0] - lo[0]).max(1e-6),
            (hi[1] - lo[1]).max(1e-6),
            (hi[2] - lo[2]).max(1e-6),
        ];
        Ok(Scene {
            cloud,
            extent,
            origin: lo,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// The two block-sampling regimes: fixed-at-preprocessing 1.5 m blocks of
/// 8192 points, or on-the-fly 2.0 m blocks of 14564 points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Pv,
    Fp,
}

impl Protocol {
    pub fn block_points(self) -> usize {
        match self {
            Protocol::Pv => 8192,
            Protocol::Fp => 14564,
        }
    }

    pub fn block_side(self) -> f64 {
        match self {
            Protocol::Pv => 1.5,
            Protocol::Fp => 2.0,
        }
    }
}

/// Fixed-size training sample: block-local coordinates plus six feature
/// channels (RGB and room-normalized coordinates).
#[derive(Debug, Clone)]
pub struct Block<S> {
    pub cloud: PointCloud<S>,
    /// Scene indices each block row was drawn from (for vote aggregation).
    pub source_indices: Vec<u32>,
}

pub const BLOCK_FEATURE_CHANNELS: usize = 6;

/// Sample one block under the given protocol.
pub fn sample_block<S: Scalar>(
    scene: &Scene<S>,
    protocol: Protocol,
    rng: &mut ChaCha8Rng,
) -> Result<Block<S>> {
    sample_block_with(scene, protocol.block_side(), protocol.block_points(), rng)
}

/// Sample one square-column block of `side` meters with exactly `count`
/// points (resampling with replacement when short, uniform subsampling when
/// over).
pub fn sample_block_with<S: Scalar>(
    scene: &Scene<S>,
    side: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Block<S>> {
    if scene.is_empty() {
        return Err(Error::Data("cannot sample a block from an empty scene".into()));
    }
    if count == 0 || side <= 0.0 {
        return Err(Error::Config(format!("block side {side}, count {count}")));
    }

    for _attempt in 0..10 {
        let mut center = [0.0f64; 2];
        for k in 0..2 {
            let usable = (scene.extent[k] - side).max(0.0);
            center[k] = scene.origin[k] + side / 2.0 + rng.gen::<f64>() * usable;
        }
        if let Some(block) = block_at_center(scene, center, side, count, rng) {
            return Ok(block);
        }
    }
    Err(Error::Sampling(
        "no non-empty block found in 10 attempts".into(),
    ))
}

/// Block around a fixed center, or `None` if no point falls in the column.
pub fn block_at_center<S: Scalar>(
    scene: &Scene<S>,
    center: [f64; 2],
    side: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Block<S>> {
    let members: Vec<u32> = scene
        .cloud
        .coords
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            (c[0].as_f64() - center[0]).abs() <= side / 2.0
                && (c[1].as_f64() - center[1]).abs() <= side / 2.0
        })
        .map(|(i, _)| i as u32)
        .collect();
    if members.is_empty() {
        return None;
    }
    let chosen: Vec<u32> = if members.len() >= count {
        // Uniform subsample without replacement (partial Fisher-Yates).
        let mut pool = members;
        for i in 0..count {
            let j = i + rng.gen_range(0..pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    } else {
        (0..count)
            .map(|_| members[rng.gen_range(0..members.len())])
            .collect()
    };
    Some(build_block(scene, center, chosen))
}

fn build_block<S: Scalar>(scene: &Scene<S>, center: [f64; 2], chosen: Vec<u32>) -> Block<S> {
    let n = chosen.len();
    let rgb = scene.cloud.feature_channels().min(3);
    let mut coords = Vec::with_capacity(n);
    let mut feats = Tensor::zeros(vec![n, BLOCK_FEATURE_CHANNELS]);
    let mut labels = scene.cloud.labels.as_ref().map(|_| Vec::with_capacity(n));
    for (row, &idx) in chosen.iter().enumerate() {
        let c = &scene.cloud.coords[idx as usize];
        coords.push([
            S::from_f64(c[0].as_f64() - center[0]),
            S::from_f64(c[1].as_f64() - center[1]),
            c[2],
        ]);
        let frow = &mut feats.data_mut()[row * 6..(row + 1) * 6];
        frow[..rgb].copy_from_slice(&scene.cloud.features.row(idx as usize)[..rgb]);
        for k in 0..3 {
            frow[3 + k] = S::from_f64(
                ((c[k].as_f64() - scene.origin[k]) / scene.extent[k]).clamp(0.0, 1.0),
            );
        }
        if let (Some(ls), Some(sl)) = (labels.as_mut(), scene.cloud.labels.as_ref()) {
            ls.push(sl[idx as usize]);
        }
    }
    Block {
        cloud: PointCloud::new(coords, feats, labels).expect("block construction"),
        source_indices: chosen,
    }
}

// ── text point format ────────────────────────────────────────────────

/// Parse lines of `x y z [r g b] [label]`; `#` comments and blank lines are
/// skipped; RGB is rescaled from 0-255 to [0, 1].
pub fn load_points_text<S: Scalar>(path: &Path, class_count: usize) -> Result<Scene<S>> {
    let text = std::fs::read_to_string(path)?;
    parse_points_text(&text, class_count)
}

pub fn parse_points_text<S: Scalar>(text: &str, class_count: usize) -> Result<Scene<S>> {
    let mut coords = Vec::new();
    let mut rgb = Vec::new();
    let mut labels = Vec::new();
    let mut has_rgb = None;
    let mut has_label = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (rgb_here, label_here) = match fields.len() {
            3 => (false, false),
            4 => (false, true),
            6 => (true, false),
            7 => (true, true),
            n => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("{n} fields; expected x y z [r g b] [label]"),
                })
            }
        };
        if *has_rgb.get_or_insert(rgb_here) != rgb_here
            || *has_label.get_or_insert(label_here) != label_here
        {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "inconsistent column layout".into(),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad {what} value {s:?}"),
            })
        };
        coords.push([
            S::from_f64(parse(fields[0], "x")?),
            S::from_f64(parse(fields[1], "y")?),
            S::from_f64(parse(fields[2], "z")?),
        ]);
        if rgb_here {
            rgb.push([
                S::from_f64(parse(fields[3], "r")? / 255.0),
                S::from_f64(parse(fields[4], "g")? / 255.0),
                S::from_f64(parse(fields[5], "b")? / 255.0),
            ]);
        }
        if label_here {
            let ltxt = *fields.last().expect("nonempty");
            let label: u32 = ltxt.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad label {ltxt:?}"),
            })?;
            labels.push(label);
        }
    }
    if coords.is_empty() {
        return Err(Error::Data("no points in file".into()));
    }
    let n = coords.len();
    let features = if rgb.is_empty() {
        Tensor::zeros(vec![n, 3])
    } else {
        let mut t = Tensor::zeros(vec![n, 3]);
        for (i, c) in rgb.iter().enumerate() {
            t.data_mut()[i * 3..i * 3 + 3].copy_from_slice(c);
        }
        t
    };
    let labels = if labels.is_empty() { None } else { Some(labels) };
    Scene::from_cloud(PointCloud::new(coords, features, labels)?, class_count)
}

/// Write a scene in the full `x y z r g b label` layout (labels written only
/// when present).
pub fn save_points_text<S: Scalar>(path: &Path, scene: &Scene<S>) -> Result<()> {
    let mut out = String::new();
    for (i, c) in scene.cloud.coords.iter().enumerate() {
        let f = scene.cloud.features.row(i);
        write!(
            out,
            "{} {} {} {} {} {}",
            c[0].as_f64(),
            c[1].as_f64(),
            c[2].as_f64(),
            f[0].as_f64() * 255.0,
            f[1].as_f64() * 255.0,
            f[2].as_f64() * 255.0,
        )
        .expect("string write");
        if let Some(labels) = &scene.cloud.labels {
            write!(out, " {}", labels[i]).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── synthetic scenes ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Floor,
    Ceiling,
    /// Wall index 0..4.
    Wall(usize),
    Box3 {
        center: [f64; 3],
        half: [f64; 3],
    },
}

/// Deterministic-from-seed room: floor/ceiling/wall planes plus axis-aligned
/// boxes. Each primitive carries one class label (`index mod class_count`)
/// and colors correlate with the class.
pub fn generate_synthetic_scene<S: Scalar>(
    seed: u64,
    class_count: usize,
    points_per_scene: usize,
) -> Result<Scene<S>> {
    if class_count < 2 {
        return Err(Error::Config("synthetic scenes need >= 2 classes".into()));
    }
    if points_per_scene < 16 {
        return Err(Error::Config("too few points for a scene".into()));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1));

    let size = [
        4.0 + rng.gen::<f64>() * 3.0,
        4.0 + rng.gen::<f64>() * 3.0,
        3.0,
    ];
    let n_boxes = 8.max(class_count.saturating_sub(6));
    let mut prims: Vec<Primitive> = vec![Primitive::Floor, Primitive::Ceiling];
    for w in 0..4 {
        prims.push(Primitive::Wall(w));
    }
    for _ in 0..n_boxes {
        let half = [
            0.15 + rng.gen::<f64>() * 0.35,
            0.15 + rng.gen::<f64>() * 0.35,
            0.15 + rng.gen::<f64>() * 0.45,
        ];
        let center = [
            half[0] + 0.3 + rng.gen::<f64>() * (size[0] - 2.0 * (half[0] + 0.3)),
            half[1] + 0.3 + rng.gen::<f64>() * (size[1] - 2.0 * (half[1] + 0.3)),
            half[2] + 0.01,
        ];
        prims.push(Primitive::Box3 { center, half });
    }

    // Point budget: planes get fixed shares, boxes split the rest.
    let mut shares = vec![0.18, 0.12, 0.07, 0.07, 0.07, 0.07];
    let box_share = (1.0 - shares.iter().sum::<f64>()) / n_boxes as f64;
    shares.extend(std::iter::repeat(box_share).take(n_boxes));
    let mut counts: Vec<usize> = shares
        .iter()
        .map(|s| (s * points_per_scene as f64).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut i = 0;
    let slots = counts.len();
    while assigned < points_per_scene {
        counts[i % slots] += 1;
        assigned += 1;
        i += 1;
    }

    let palette: Vec<[f64; 3]> = (0..class_count)
        .map(|c| {
            let t = c as f64 / class_count as f64;
            let angle = t * std::f64::consts::TAU;
            [
                0.5 + 0.45 * angle.cos(),
                0.5 + 0.45 * (angle + 2.0).cos(),
                0.5 + 0.45 * (angle + 4.0).cos(),
            ]
        })
        .collect();

    let total: usize = counts.iter().sum();
    let mut coords = Vec::with_capacity(total);
    let mut feats = Tensor::zeros(vec![total, 3]);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0usize;
    for (pi, (prim, &count)) in prims.iter().zip(&counts).enumerate() {
        let label = (pi % class_count) as u32;
        for _ in 0..count {
            let mut p = match prim {
                Primitive::Floor => [
                    rng.gen::<f64>() * size[0],
                    rng.gen::<f64>() * size[1],
                    0.0,
                ],
                Primitive::Ceiling => [
                    rng.gen::<f64>() * size[0],
                    rng.gen::<f64>() * size[1],
                    size[2],
                ],
                Primitive::Wall(w) => {
                    let along = rng.gen::<f64>();
                    let up = rng.gen::<f64>() * size[2];
                    match w {
                        0 => [along * size[0], 0.0, up],
                        1 => [along * size[0], size[1], up],
                        2 => [0.0, along * size[1], up],
                        _ => [size[0], along * size[1], up],
                    }
                }
                Primitive::Box3 { center, half } => [
                    center[0] + (rng.gen::<f64>() * 2.0 - 1.0) * half[0],
                    center[1] + (rng.gen::<f64>() * 2.0 - 1.0) * half[1],
                    center[2] + (rng.gen::<f64>() * 2.0 - 1.0) * half[2],
                ],
            };
            for v in &mut p {
                *v += (rng.gen::<f64>() - 0.5) * 0.02;
            }
            coords.push([S::from_f64(p[0]), S::from_f64(p[1]), S::from_f64(p[2])]);
            let color = &palette[label as usize];
            let frow = &mut feats.data_mut()[row * 3..row * 3 + 3];
            for k in 0..3 {
                let v = color[k] + (rng.gen::<f64>() - 0.5) * 0.1;
                frow[k] = S::from_f64(v.clamp(0.0, 1.0));
            }
            labels.push(label);
            row += 1;
        }
    }

    Scene::from_cloud(
        PointCloud::new(coords, feats, Some(labels))?,
        class_count,
    )
}

// ── metrics ──────────────────────────────────────────────────────────

/// Per-class intersection over union plus the mean over classes present in
/// either prediction or ground truth. Absent classes carry `None`.
pub fn compute_miou(pred: &[u32], gt: &[u32], class_count: usize) -> Result<(Vec<Option<f64>>, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l as usize >= class_count) {
        return Err(Error::Data(format!("label {bad} of {class_count} classes")));
    }
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fneg = vec![0usize; class_count];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fneg[g as usize] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(class_count);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..class_count {
        let union = tp[c] + fp[c] + fneg[c];
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp[c] as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    let mean = if present > 0 { sum / present as f64 } else { 0.0 };
    Ok((per_class, mean))
}

/// Label ranges per category for part segmentation.
#[derive(Debug, Clone)]
pub struct PartRanges {
    pub ranges: Vec<Range<u32>>,
}

/// One evaluated sample: predictions, ground truth, and its category.
pub struct SamplePrediction<'a> {
    pub pred: &'a [u32],
    pub gt: &'a [u32],
    pub category: usize,
}

/// Instance mIoU: per-sample mean IoU over that category's parts (parts
/// absent from both prediction and truth count as 1), averaged over samples.
pub fn compute_instance_miou(samples: &[SamplePrediction<'_>], parts: &PartRanges) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for (si, sample) in samples.iter().enumerate() {
        let range = parts
            .ranges
            .get(sample.category)
            .ok_or_else(|| Error::Data(format!("unknown category {} in sample {si}", sample.category)))?;
        if sample.pred.len() != sample.gt.len() {
            return Err(Error::Dimension(format!("sample {si} length mismatch")));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for part in range.clone() {
            let mut tp = 0usize;
            let mut union = 0usize;
            for (&p, &g) in sample.pred.iter().zip(sample.gt) {
                let pp = p == part;
                let gg = g == part;
                if pp && gg {
                    tp += 1;
                }
                if pp || gg {
                    union += 1;
                }
            }
            sum += if union == 0 { 1.0 } else { tp as f64 / union as f64 };
            count += 1;
        }
        total += if count == 0 { 1.0 } else { sum / count as f64 };
    }
    Ok(total / samples.len() as f64)
}

/// CSV rendering of per-class IoUs: header, one row per present class, and a
/// final `mean` row.
pub fn miou_csv(per_class: &[Option<f64>], mean: f64) -> String {
    let mut out = String::from("class_id,iou\n");
    for (c, iou) in per_class.iter().enumerate() {
        if let Some(v) = iou {
            writeln!(out, "{c},{v:.6}").expect("string write");
        }
    }
    writeln!(out, "mean,{mean:.6}").expect("string write");
    out
}
