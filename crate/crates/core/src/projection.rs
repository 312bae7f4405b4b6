//! The three projection operators that turn per-point features into a dense
//! planar feature map, and the backprojection that returns planar features
//! to points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::numkernel::{Mode, Scalar, Tape, Tensor, ValId};
use crate::pointgrid::GridMapping;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    /// Cell value = mean of member features.
    Average,
    /// Each point splats to its four nearest cell centers; member cells
    /// normalize by accumulated weight, memberless cells stay zero.
    Bilinear,
    /// Per-point MLP on augmented features, then a max over each cell.
    Pointnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackprojectionMode {
    /// Every point takes its cell's feature unchanged.
    Nearest,
    /// Cell feature scaled by `w = 1 - |planar offset to cell center|_1`
    /// in cell units, so `w` lies in [0, 1].
    DistanceWeighted,
}

/// Dense `H x W x C` planar feature map plus the identity of the mapping
/// that produced it. Cells whose index set is empty are exactly zero.
#[derive(Debug, Clone)]
pub struct FeatureMap2D<S> {
    pub values: Tensor<S>,
    pub provenance: u64,
}

impl<S: Scalar> FeatureMap2D<S> {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn cell(&self, i: usize, j: usize) -> &[S] {
        let c = self.channels();
        let flat = i * self.width() + j;
        &self.values.data()[flat * c..(flat + 1) * c]
    }

    /// True when every memberless cell is a bit-exact zero vector.
    pub fn empty_cells_exactly_zero(&self, gm: &GridMapping<S>) -> bool {
        let c = self.channels();
        for cell in 0..gm.cells() {
            if gm.members_flat(cell).is_empty()
                && self.values.data()[cell * c..(cell + 1) * c]
                    .iter()
                    .any(|&v| v != S::zero())
            {
                return false;
            }
        }
        true
    }
}

/// Tape-level projection: `features` is `N x C` (already augmented when the
/// method is pointnet); returns the `(R*R) x C'` cell tensor.
pub fn project_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    features: ValId,
    gm: &GridMapping<S>,
    method: ProjectionMethod,
    proj_mlp: Option<(&mut Mlp<S>, &str)>,
    mode: Mode,
) -> Result<ValId> {
    if tape.value(features).rows() != gm.point_count() {
        return Err(Error::Consistency(format!(
            "project: {} feature rows vs mapping for {} points",
            tape.value(features).rows(),
            gm.point_count()
        )));
    }
    let cells = gm.cells();
    match method {
        ProjectionMethod::Average => tape.segmented_mean(features, &gm.cell_of, cells),
        ProjectionMethod::Bilinear => {
            let contribs = bilinear_contributions(gm);
            tape.scatter_bilinear(features, cells, contribs)
        }
        ProjectionMethod::Pointnet => {
            let (mlp, name) = proj_mlp.ok_or_else(|| {
                Error::Config("pointnet projection requires a projection MLP".into())
            })?;
            let h = mlp.forward(tape, name, features, mode)?;
            tape.segmented_max(h, &gm.cell_of, cells)
        }
    }
}

/// Four-neighbor splat weights per point, restricted to in-grid cells that
/// have members (the zero-fill rule for empty cells).
fn bilinear_contributions<S: Scalar>(gm: &GridMapping<S>) -> Vec<(u32, u32, S)> {
    let r = gm.resolution as isize;
    let mut contribs = Vec::with_capacity(gm.point_count() * 4);
    for p in 0..gm.point_count() {
        let pos = gm.planar_position(p);
        let gu = pos[0].as_f64() - 0.5;
        let gv = pos[1].as_f64() - 0.5;
        let i0 = gu.floor() as isize;
        let j0 = gv.floor() as isize;
        let fu = gu - i0 as f64;
        let fv = gv - j0 as f64;
        for (di, wu) in [(0isize, 1.0 - fu), (1, fu)] {
            for (dj, wv) in [(0isize, 1.0 - fv), (1, fv)] {
                let (i, j) = (i0 + di, j0 + dj);
                let w = wu * wv;
                if w <= 0.0 || i < 0 || j < 0 || i >= r || j >= r {
                    continue;
                }
                let cell = (i * r + j) as usize;
                if gm.members_flat(cell).is_empty() {
                    continue;
                }
                contribs.push((p as u32, cell as u32, S::from_f64(w)));
            }
        }
    }
    contribs
}

/// Tape-level backprojection from a `(R*R) x C` cell tensor to `N x C`.
pub fn backproject_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    cells: ValId,
    gm: &GridMapping<S>,
    mode: BackprojectionMode,
) -> Result<ValId> {
    if tape.value(cells).rows() != gm.cells() {
        return Err(Error::Consistency(format!(
            "backproject: {} cell rows vs {} grid cells",
            tape.value(cells).rows(),
            gm.cells()
        )));
    }
    let gathered = tape.gather_rows(cells, &gm.cell_of)?;
    match mode {
        BackprojectionMode::Nearest => Ok(gathered),
        BackprojectionMode::DistanceWeighted => {
            let w: Vec<S> = (0..gm.point_count())
                .map(|p| gm.backproject_weight(p))
                .collect();
            tape.scale_rows(gathered, w)
        }
    }
}

/// Standalone projection producing a [`FeatureMap2D`].
pub fn project<S: Scalar>(
    features: &Tensor<S>,
    gm: &GridMapping<S>,
    method: ProjectionMethod,
    proj_mlp: Option<&mut Mlp<S>>,
    mode: Mode,
) -> Result<FeatureMap2D<S>> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let cells = project_on_tape(
        &mut tape,
        f,
        gm,
        method,
        proj_mlp.map(|m| (m, "proj_mlp")),
        mode,
    )?;
    let c = tape.value(cells).cols();
    let values = tape
        .value(cells)
        .clone()
        .reshaped(vec![gm.resolution, gm.resolution, c])?;
    Ok(FeatureMap2D {
        values,
        provenance: gm.id(),
    })
}

/// Standalone backprojection of a [`FeatureMap2D`] produced under `gm`.
pub fn backproject<S: Scalar>(
    fm: &FeatureMap2D<S>,
    gm: &GridMapping<S>,
    mode: BackprojectionMode,
) -> Result<Tensor<S>> {
    if fm.provenance != gm.id() {
        return Err(Error::Consistency(
            "feature map was produced under a different grid mapping".into(),
        ));
    }
    let (h, w, c) = (fm.height(), fm.width(), fm.channels());
    let mut tape = Tape::new();
    let cells = tape.constant(fm.values.clone().reshaped(vec![h * w, c])?);
    let out = backproject_on_tape(&mut tape, cells, gm, mode)?;
    Ok(tape.value(out).clone())
}
