//! The PPCNN++ encoder/decoder: set-abstraction stages (PPConv layers, then
//! sample-group-pool) and feature-propagation stages (interpolate, concat
//! skip features, MLPs, PPConv layers), ending in a per-point classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv2dblock::ConvVariant;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::nn::{Linear, Mlp, ParamKind, Parameters};
use crate::numkernel::{Mode, Scalar, Tape, Tensor, ValId};
use crate::pointgrid::Axis;
use crate::ppconv::{PPConv, PPConvConfig};
use crate::projection::{BackprojectionMode, ProjectionMethod};

use super::sampling::{ball_query, farthest_point_sampling, three_nn_weights};

/// `[channels, layers, resolution]` for a run of PPConv layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpLayersSpec {
    pub channels: usize,
    pub layers: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaSpec {
    pub ppconv: Option<PpLayersSpec>,
    /// Number of sampled centers.
    pub sample: usize,
    /// Neighborhood radius in coordinate units.
    pub radius: f64,
    /// Neighbors gathered per center.
    pub nsample: usize,
    /// Widths of the shared MLP applied to `[feature | relative coords]`.
    pub mlp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpSpec {
    pub mlp: Vec<usize>,
    pub ppconv: Option<PpLayersSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub class_count: usize,
    pub sa: Vec<SaSpec>,
    pub fp: Vec<FpSpec>,
    /// Run FP-stage PPConv layers before (instead of after) the FP MLP.
    #[serde(default)]
    pub fp_ppconv_first: bool,
}

impl NetworkSpec {
    /// Scene-segmentation configuration (13 classes, RGB + normalized
    /// coordinates input).
    pub fn s3dis() -> Self {
        let pp = |channels, layers, resolution| {
            Some(PpLayersSpec {
                channels,
                layers,
                resolution,
            })
        };
        NetworkSpec {
            input_channels: 6,
            class_count: 13,
            sa: vec![
                SaSpec { ppconv: pp(32, 2, 64), sample: 1024, radius: 0.1, nsample: 32, mlp: vec![32, 64] },
                SaSpec { ppconv: pp(64, 3, 32), sample: 256, radius: 0.2, nsample: 32, mlp: vec![64, 128] },
                SaSpec { ppconv: pp(128, 3, 16), sample: 64, radius: 0.4, nsample: 32, mlp: vec![128, 256] },
                SaSpec { ppconv: None, sample: 16, radius: 0.8, nsample: 32, mlp: vec![256, 256, 512] },
            ],
            fp: vec![
                FpSpec { mlp: vec![256, 256], ppconv: pp(256, 1, 8) },
                FpSpec { mlp: vec![256, 256], ppconv: pp(256, 1, 16) },
                FpSpec { mlp: vec![256, 128], ppconv: pp(128, 2, 32) },
                FpSpec { mlp: vec![128, 128, 64], ppconv: pp(64, 1, 64) },
            ],
            fp_ppconv_first: false,
        }
    }

    /// Object part-segmentation configuration (50 part labels, normals input).
    pub fn shapenet() -> Self {
        let pp = |channels, layers, resolution| {
            Some(PpLayersSpec {
                channels,
                layers,
                resolution,
            })
        };
        NetworkSpec {
            input_channels: 3,
            class_count: 50,
            sa: vec![
                SaSpec { ppconv: pp(32, 1, 64), sample: 512, radius: 0.1, nsample: 32, mlp: vec![32, 64] },
                SaSpec { ppconv: pp(64, 1, 32), sample: 128, radius: 0.2, nsample: 32, mlp: vec![64, 128] },
                SaSpec { ppconv: pp(128, 1, 16), sample: 32, radius: 0.4, nsample: 32, mlp: vec![128, 256] },
                SaSpec { ppconv: None, sample: 16, radius: 0.8, nsample: 16, mlp: vec![256, 512] },
            ],
            fp: vec![
                FpSpec { mlp: vec![256, 256], ppconv: pp(256, 1, 8) },
                FpSpec { mlp: vec![256, 256], ppconv: pp(256, 1, 16) },
                FpSpec { mlp: vec![256, 128], ppconv: pp(128, 1, 32) },
                FpSpec { mlp: vec![128, 64], ppconv: pp(64, 1, 64) },
            ],
            fp_ppconv_first: false,
        }
    }

    /// Desk-scale configuration for synthetic-data training and tests.
    pub fn toy(class_count: usize) -> Self {
        let pp = |channels, layers, resolution| {
            Some(PpLayersSpec {
                channels,
                layers,
                resolution,
            })
        };
        NetworkSpec {
            input_channels: 6,
            class_count,
            sa: vec![
                SaSpec { ppconv: pp(16, 1, 8), sample: 128, radius: 0.25, nsample: 12, mlp: vec![16, 32] },
                SaSpec { ppconv: pp(32, 1, 4), sample: 32, radius: 0.5, nsample: 12, mlp: vec![32, 64] },
            ],
            fp: vec![
                FpSpec { mlp: vec![64, 32], ppconv: pp(32, 1, 4) },
                FpSpec { mlp: vec![32, 16], ppconv: pp(16, 1, 8) },
            ],
            fp_ppconv_first: false,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "s3dis" => Some(Self::s3dis()),
            "shapenet" => Some(Self::shapenet()),
            "toy" => Some(Self::toy(13)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sa.is_empty() || self.fp.len() != self.sa.len() {
            return Err(Error::Config(format!(
                "{} SA stages require {} FP stages (got {})",
                self.sa.len(),
                self.sa.len(),
                self.fp.len()
            )));
        }
        if self.class_count < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        for (i, sa) in self.sa.iter().enumerate() {
            if sa.mlp.is_empty() {
                return Err(Error::Config(format!("SA stage {i} has no MLP widths")));
            }
            if sa.sample == 0 || sa.nsample == 0 || sa.radius <= 0.0 {
                return Err(Error::Config(format!("SA stage {i} sampling numbers")));
            }
            if i > 0 && self.sa[i - 1].sample < sa.sample {
                return Err(Error::Config(format!(
                    "SA stage {i} samples more points than stage {} provides",
                    i - 1
                )));
            }
        }
        for (i, fp) in self.fp.iter().enumerate() {
            if fp.mlp.is_empty() {
                return Err(Error::Config(format!("FP stage {i} has no MLP widths")));
            }
        }
        Ok(())
    }
}

/// PPConv knobs shared by every layer in a network, applied on top of a
/// [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PPConvTemplate {
    pub axes: Vec<Axis>,
    pub projection: ProjectionMethod,
    pub backprojection: BackprojectionMode,
    pub conv_variant: ConvVariant,
    pub fusion: FusionKind,
    pub include_point_branch: bool,
    /// Overrides the first SA layer's grid resolution, the usual tuning
    /// knob; deeper layers keep their configured values.
    #[serde(default)]
    pub first_layer_resolution: Option<usize>,
}

impl Default for PPConvTemplate {
    fn default() -> Self {
        PPConvTemplate {
            axes: vec![Axis::X, Axis::Y, Axis::Z],
            projection: ProjectionMethod::Pointnet,
            backprojection: BackprojectionMode::DistanceWeighted,
            conv_variant: ConvVariant::ResidualSe,
            fusion: FusionKind::Concat,
            include_point_branch: true,
            first_layer_resolution: None,
        }
    }
}

/// Everything needed to rebuild a network structurally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub network: NetworkSpec,
    pub ppconv: PPConvTemplate,
}

struct SaStage<S> {
    ppconv: Vec<PPConv<S>>,
    sample: usize,
    radius: f64,
    nsample: usize,
    mlps: Vec<Mlp<S>>,
}

struct FpStage<S> {
    mlps: Vec<Mlp<S>>,
    ppconv: Vec<PPConv<S>>,
}

/// Per-forward record of the encoder ladder, for conformance checks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub input_points: usize,
    pub sa_points: Vec<usize>,
    pub fp_points: Vec<usize>,
}

pub struct Network<S> {
    pub spec: ModelSpec,
    sa: Vec<SaStage<S>>,
    fp: Vec<FpStage<S>>,
    classifier: Linear<S>,
    pub trace: ForwardTrace,
}

fn make_ppconv_run<S: Scalar>(
    spec: &PpLayersSpec,
    template: &PPConvTemplate,
    c_in: usize,
    resolution_override: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<PPConv<S>>> {
    let mut layers = Vec::with_capacity(spec.layers);
    let mut cin = c_in;
    for _ in 0..spec.layers {
        let cfg = PPConvConfig {
            c_in: cin,
            c_out: spec.channels,
            axes: template.axes.clone(),
            resolution: resolution_override.unwrap_or(spec.resolution),
            projection: template.projection,
            backprojection: template.backprojection,
            conv_variant: template.conv_variant,
            fusion: template.fusion,
            include_point_branch: template.include_point_branch,
        };
        layers.push(PPConv::new(cfg, rng)?);
        cin = spec.channels;
    }
    Ok(layers)
}

/// Build a network with Kaiming-style initialization seeded by `seed`.
pub fn build_network<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Network<S>> {
    spec.network.validate()?;
    let net = &spec.network;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut level_channels = vec![net.input_channels];
    let mut sa_stages = Vec::new();
    for (si, sa) in net.sa.iter().enumerate() {
        let mut c = *level_channels.last().expect("nonempty");
        let ppconv = match &sa.ppconv {
            Some(pp) => {
                let over = if si == 0 {
                    spec.ppconv.first_layer_resolution
                } else {
                    None
                };
                let run = make_ppconv_run(pp, &spec.ppconv, c, over, &mut rng)?;
                c = pp.channels;
                run
            }
            None => Vec::new(),
        };
        let mut mlps = Vec::new();
        let mut w = c + 3;
        for &width in &sa.mlp {
            mlps.push(Mlp::new(w, width, &mut rng));
            w = width;
        }
        level_channels.push(w);
        sa_stages.push(SaStage {
            ppconv,
            sample: sa.sample,
            radius: sa.radius,
            nsample: sa.nsample,
            mlps,
        });
    }

    let depth = net.sa.len();
    let mut fp_stages = Vec::new();
    let mut c_deep = *level_channels.last().expect("nonempty");
    for (fi, fp) in net.fp.iter().enumerate() {
        let skip_c = level_channels[depth - 1 - fi];
        let mut w = c_deep + skip_c;
        let mut ppconv_first = Vec::new();
        if net.fp_ppconv_first {
            if let Some(pp) = &fp.ppconv {
                ppconv_first = make_ppconv_run(pp, &spec.ppconv, w, None, &mut rng)?;
                w = pp.channels;
            }
        }
        let mut mlps = Vec::new();
        for &width in &fp.mlp {
            mlps.push(Mlp::new(w, width, &mut rng));
            w = width;
        }
        let mut ppconv_after = Vec::new();
        if !net.fp_ppconv_first {
            if let Some(pp) = &fp.ppconv {
                ppconv_after = make_ppconv_run(pp, &spec.ppconv, w, None, &mut rng)?;
                w = pp.channels;
            }
        }
        let ppconv = if net.fp_ppconv_first {
            ppconv_first
        } else {
            ppconv_after
        };
        fp_stages.push(FpStage { mlps, ppconv });
        c_deep = w;
    }

    let classifier = Linear::new(c_deep, net.class_count, &mut rng);
    Ok(Network {
        spec: spec.clone(),
        sa: sa_stages,
        fp: fp_stages,
        classifier,
        trace: ForwardTrace::default(),
    })
}

impl<S: Scalar> Network<S> {
    pub fn class_count(&self) -> usize {
        self.spec.network.class_count
    }

    pub fn input_channels(&self) -> usize {
        self.spec.network.input_channels
    }

    /// Grid resolutions of the PPConv runs along the encoder (then decoder),
    /// `None` for stages without PPConv layers.
    pub fn sa_resolutions(&self) -> Vec<Option<usize>> {
        self.sa
            .iter()
            .map(|s| s.ppconv.first().map(|p| p.cfg.resolution))
            .collect()
    }

    pub fn fp_resolutions(&self) -> Vec<Option<usize>> {
        self.fp
            .iter()
            .map(|s| s.ppconv.first().map(|p| p.cfg.resolution))
            .collect()
    }

    pub fn sa_sample_counts(&self) -> Vec<usize> {
        self.sa.iter().map(|s| s.sample).collect()
    }

    /// Full forward pass to per-point logits. `fps_seed` offsets the greedy
    /// sampling start (0 = deterministic start at index 0).
    pub fn forward(
        &mut self,
        tape: &mut Tape<S>,
        coords: &[[S; 3]],
        features: ValId,
        mode: Mode,
        fps_seed: u64,
    ) -> Result<ValId> {
        if tape.value(features).rows() != coords.len() {
            return Err(Error::Consistency(
                "coordinate and feature row counts differ".into(),
            ));
        }
        if tape.value(features).cols() != self.spec.network.input_channels {
            return Err(Error::Dimension(format!(
                "network expects {} input channels, got {}",
                self.spec.network.input_channels,
                tape.value(features).cols()
            )));
        }
        self.trace = ForwardTrace {
            input_points: coords.len(),
            ..Default::default()
        };

        // Encoder; keep (coords, features) per level for the skips.
        let mut levels: Vec<(Vec<[S; 3]>, ValId)> = vec![(coords.to_vec(), features)];
        let mut cur_coords = coords.to_vec();
        let mut cur = features;
        let mut sample_state = fps_seed;
        for (si, stage) in self.sa.iter_mut().enumerate() {
            let sname = format!("net.sa{si}");
            for (li, pp) in stage.ppconv.iter_mut().enumerate() {
                cur = pp
                    .forward(tape, &format!("{sname}.pp{li}"), &cur_coords, cur, mode)
                    .map_err(|e| e.in_stage(format!("SA stage {si} ppconv {li}")))?;
            }

            let n = cur_coords.len();
            if stage.sample > n {
                return Err(Error::Sampling(format!(
                    "SA stage {si} wants {} centers from {n} points",
                    stage.sample
                )));
            }
            // Mix the stage index into the start choice; 0 stays fully
            // deterministic (start at index 0 everywhere).
            let start = if sample_state == 0 {
                0
            } else {
                sample_state = sample_state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (sample_state >> 33) as usize % n
            };
            let centers = farthest_point_sampling(&cur_coords, stage.sample, start)
                .map_err(|e| e.in_stage(format!("SA stage {si} sampling")))?;
            let center_coords: Vec<[S; 3]> =
                centers.iter().map(|&i| cur_coords[i as usize]).collect();
            let groups = ball_query(&cur_coords, &center_coords, stage.radius, stage.nsample)
                .map_err(|e| e.in_stage(format!("SA stage {si} grouping")))?;

            let gathered = tape.gather_rows(cur, &groups)?;
            let mut rel = Tensor::zeros(vec![groups.len(), 3]);
            for (gi, &pi) in groups.iter().enumerate() {
                let center = &center_coords[gi / stage.nsample];
                let p = &cur_coords[pi as usize];
                let row = &mut rel.data_mut()[gi * 3..gi * 3 + 3];
                for k in 0..3 {
                    row[k] = p[k] - center[k];
                }
            }
            let rel = tape.constant(rel);
            let mut h = tape.concat_cols(&[gathered, rel])?;
            for (mi, mlp) in stage.mlps.iter_mut().enumerate() {
                h = mlp.forward(tape, &format!("{sname}.mlp{mi}"), h, mode)?;
            }
            let seg: Vec<u32> = (0..groups.len())
                .map(|i| (i / stage.nsample) as u32)
                .collect();
            cur = tape.segmented_max(h, &seg, stage.sample)?;
            cur_coords = center_coords;
            self.trace.sa_points.push(cur_coords.len());
            levels.push((cur_coords.clone(), cur));
        }

        // Decoder.
        let depth = self.sa.len();
        for (fi, stage) in self.fp.iter_mut().enumerate() {
            let fname = format!("net.fp{fi}");
            let (dst_coords, skip) = levels[depth - 1 - fi].clone();
            let (idx, w) = three_nn_weights(&cur_coords, &dst_coords)
                .map_err(|e| e.in_stage(format!("FP stage {fi} interpolation")))?;
            let interp = tape.weighted_gather(cur, idx, w, 3)?;
            let mut h = tape.concat_cols(&[interp, skip])?;
            if self.spec.network.fp_ppconv_first {
                for (li, pp) in stage.ppconv.iter_mut().enumerate() {
                    h = pp
                        .forward(tape, &format!("{fname}.pp{li}"), &dst_coords, h, mode)
                        .map_err(|e| e.in_stage(format!("FP stage {fi} ppconv {li}")))?;
                }
            }
            for (mi, mlp) in stage.mlps.iter_mut().enumerate() {
                h = mlp.forward(tape, &format!("{fname}.mlp{mi}"), h, mode)?;
            }
            if !self.spec.network.fp_ppconv_first {
                for (li, pp) in stage.ppconv.iter_mut().enumerate() {
                    h = pp
                        .forward(tape, &format!("{fname}.pp{li}"), &dst_coords, h, mode)
                        .map_err(|e| e.in_stage(format!("FP stage {fi} ppconv {li}")))?;
                }
            }
            cur = h;
            cur_coords = dst_coords;
            self.trace.fp_points.push(cur_coords.len());
        }

        self.classifier.forward(tape, "net.classifier", cur)
    }
}

impl<S: Scalar> Parameters<S> for Network<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<S>)) {
        for (si, stage) in self.sa.iter().enumerate() {
            for (li, pp) in stage.ppconv.iter().enumerate() {
                pp.visit(&format!("{prefix}.sa{si}.pp{li}"), f);
            }
            for (mi, mlp) in stage.mlps.iter().enumerate() {
                mlp.visit(&format!("{prefix}.sa{si}.mlp{mi}"), f);
            }
        }
        for (fi, stage) in self.fp.iter().enumerate() {
            for (mi, mlp) in stage.mlps.iter().enumerate() {
                mlp.visit(&format!("{prefix}.fp{fi}.mlp{mi}"), f);
            }
            for (li, pp) in stage.ppconv.iter().enumerate() {
                pp.visit(&format!("{prefix}.fp{fi}.pp{li}"), f);
            }
        }
        self.classifier.visit(&format!("{prefix}.classifier"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, &mut Tensor<S>)) {
        for (si, stage) in self.sa.iter_mut().enumerate() {
            for (li, pp) in stage.ppconv.iter_mut().enumerate() {
                pp.visit_mut(&format!("{prefix}.sa{si}.pp{li}"), f);
            }
            for (mi, mlp) in stage.mlps.iter_mut().enumerate() {
                mlp.visit_mut(&format!("{prefix}.sa{si}.mlp{mi}"), f);
            }
        }
        for (fi, stage) in self.fp.iter_mut().enumerate() {
            for (mi, mlp) in stage.mlps.iter_mut().enumerate() {
                mlp.visit_mut(&format!("{prefix}.fp{fi}.mlp{mi}"), f);
            }
            for (li, pp) in stage.ppconv.iter_mut().enumerate() {
                pp.visit_mut(&format!("{prefix}.fp{fi}.pp{li}"), f);
            }
        }
        self.classifier
            .visit_mut(&format!("{prefix}.classifier"), f);
    }
}

/// Mean over points of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss<S: Scalar>(logits: &Tensor<S>, labels: &[u32]) -> Result<S> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} logit rows vs {} labels",
            labels.len()
        )));
    }
    let mut total = S::zero();
    for (row, &label) in labels.iter().enumerate() {
        if label as usize >= k {
            return Err(Error::Data(format!("label {label} out of range 0..{k}")));
        }
        let xrow = logits.row(row);
        let m = xrow.iter().fold(xrow[0], |m, &v| if v > m { v } else { m });
        let lse = xrow.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
        total += lse - xrow[label as usize];
    }
    Ok(total / S::from_f64(n as f64))
}
