//! Penalized model selection with a penalty `N d_m / norm`, the exact path
//! `N -> m̂(N)`, dimension-jump detection and the slope heuristic.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::cls::{FitResult, PlaneCls, TorusCls};
use crate::error::{Error, Result};
use crate::lattice::{sublattice_for_model, ModelCollection};
use crate::params::ConstraintSpec;
use crate::simulate::FieldObservations;

/// Start of a segment of the selection path: for penalty multipliers in
/// `[n, next.n)` the selected model is `model`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Breakpoint {
    pub n: f64,
    pub model: usize,
    pub dim: usize,
}

/// The piecewise-constant, right-continuous map `N -> m̂(N)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionPath {
    /// Sorted by `n`, the first one at `n = 0`.
    pub breakpoints: Vec<Breakpoint>,
    pub normalization: f64,
}

impl SelectionPath {
    /// `m̂(N)`; at a breakpoint the smaller model is returned.
    pub fn model_at(&self, n: f64) -> usize {
        self.segment_at(n).model
    }

    pub fn dim_at(&self, n: f64) -> usize {
        self.segment_at(n).dim
    }

    fn segment_at(&self, n: f64) -> &Breakpoint {
        let k = self.breakpoints.partition_point(|b| b.n <= n);
        &self.breakpoints[k.saturating_sub(1)]
    }

    /// Breakpoints where the selection actually changes (all but the first).
    pub fn jumps(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.breakpoints.windows(2).map(|w| (w[1].n, w[0].dim - w[1].dim))
    }
}

/// Exact path from `(dimension, criterion)` points.
///
/// The selected model for `N` minimizes `γ + N d / norm`, so the path walks
/// the strict lower convex hull of `(d / norm, γ)` from the lowest
/// criterion towards dimension zero. Ties go to the smaller dimension.
pub fn selection_path_from_points(points: &[(usize, f64)], normalization: f64) -> Result<SelectionPath> {
    if points.is_empty() {
        return Err(Error::EmptyFitList);
    }
    if !(normalization > 0.0) || points.iter().any(|p| !p.1.is_finite()) {
        return Err(Error::InvalidParameter("criteria and normalization must be finite and positive".into()));
    }
    // per dimension keep the smallest criterion (first index on ties)
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.cmp(&points[b].0).then(points[a].1.total_cmp(&points[b].1)).then(a.cmp(&b)));
    order.dedup_by_key(|&mut k| points[k].0);
    // the hull only runs up to the first point reaching the minimum criterion
    let gmin = order.iter().map(|&k| points[k].1).fold(f64::INFINITY, f64::min);
    let last = order.iter().position(|&k| points[k].1 == gmin).expect("nonempty");
    order.truncate(last + 1);

    let x = |k: usize| points[k].0 as f64 / normalization;
    let y = |k: usize| points[k].1;
    let mut hull: Vec<usize> = Vec::new();
    for &k in &order {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            // drop b unless it lies strictly below the chord a-k
            let cross = (x(b) - x(a)) * (y(k) - y(a)) - (y(b) - y(a)) * (x(k) - x(a));
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    let mut breakpoints = Vec::with_capacity(hull.len());
    let top = *hull.last().expect("nonempty");
    breakpoints.push(Breakpoint {
        n: 0.0,
        model: top,
        dim: points[top].0,
    });
    for w in hull.windows(2).rev() {
        let (small, large) = (w[0], w[1]);
        let n = (y(small) - y(large)) / (x(large) - x(small));
        breakpoints.push(Breakpoint {
            n,
            model: small,
            dim: points[small].0,
        });
    }
    Ok(SelectionPath {
        breakpoints,
        normalization,
    })
}

/// Exact selection path of a list of fits on identical data.
pub fn selection_path(fits: &[FitResult], iso: bool, normalization: f64) -> Result<SelectionPath> {
    let points: Vec<(usize, f64)> = fits.iter().map(|f| (f.model.dim(iso), f.criterion)).collect();
    selection_path_from_points(&points, normalization)
}

/// `argmin_m γ_m + pen_m`, ties towards the smaller dimension.
pub fn penalized_select(fits: &[FitResult], pen: &[f64]) -> Result<usize> {
    if fits.is_empty() {
        return Err(Error::EmptyFitList);
    }
    if pen.len() != fits.len() || pen.iter().any(|&p| p < 0.0 || p.is_nan()) {
        return Err(Error::InvalidParameter("one nonnegative penalty per fit is required".into()));
    }
    let points: Vec<(usize, f64)> = fits.iter().map(|f| (f.dim(), f.criterion)).collect();
    Ok(argmin_penalized(&points, pen))
}

pub(crate) fn argmin_penalized(points: &[(usize, f64)], pen: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..points.len() {
        let (vk, vb) = (points[k].1 + pen[k], points[best].1 + pen[best]);
        if vk < vb || (vk == vb && points[k].0 < points[best].0) {
            best = k;
        }
    }
    best
}

/// Location of the largest dimension jump, ties towards the largest `N`.
pub fn find_n_min(path: &SelectionPath) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (n, jump) in path.jumps() {
        if best.is_none_or(|(_, j)| jump >= j) {
            best = Some((n, jump));
        }
    }
    best.ok_or(Error::NoJump)
}

/// Outcome of the slope heuristic.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub path: SelectionPath,
    pub n_min_hat: f64,
    pub jump: usize,
    /// Index into the collection of `m̂ = m̂(2 N̂_min)`.
    pub selected: usize,
    /// `θ̃`: the selected model's estimator (refit on `Λ_m̂` for plane data).
    pub final_fit: FitResult,
    /// Per-model fits used to build the path (on `Λ_𝓜` for plane data).
    pub fits: Vec<FitResult>,
    pub iso: bool,
    /// The path was flat and `m0` was returned.
    pub degenerate: bool,
}

impl SelectionReport {
    pub fn selected_dim(&self) -> usize {
        self.fits[self.selected].model.dim(self.iso)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let diagnostics: Vec<_> = self
            .fits
            .iter()
            .map(|f| json!({"radius": f.model.radius, "d": f.model.dim(self.iso), "criterion": f.criterion}))
            .collect();
        json!({
            "path": self.path,
            "n_min_hat": self.n_min_hat,
            "jump": self.jump,
            "selected": self.selected,
            "selected_dim": self.selected_dim(),
            "degenerate": self.degenerate,
            "iso": self.iso,
            "final_fit": self.final_fit.to_json(),
            "diagnostics": diagnostics,
        })
    }
}

/// Path, jump and selected index; a flat path selects `m0`.
fn calibrate(fits: &[FitResult], iso: bool, normalization: f64) -> Result<(SelectionPath, f64, usize, usize, bool)> {
    let path = selection_path(fits, iso, normalization)?;
    match find_n_min(&path) {
        Ok((n_min, jump)) => {
            let selected = path.model_at(2.0 * n_min);
            Ok((path, n_min, jump, selected, false))
        }
        Err(Error::NoJump) => {
            log::warn!("selection path is flat; returning the empty model");
            let m0 = (0..fits.len()).min_by_key(|&k| fits[k].model.dim(iso)).expect("nonempty");
            Ok((path, 0.0, 0, m0, true))
        }
        Err(e) => Err(e),
    }
}

/// Slope heuristic on a torus: fit every model, calibrate with
/// normalization `n p1 p2`, return `θ̃ = θ̂_{m̂(2 N̂_min)}`.
pub fn slope_select_torus(
    data: &FieldObservations,
    collection: &ModelCollection,
    iso: bool,
    constraint: &ConstraintSpec,
) -> Result<SelectionReport> {
    if collection.is_empty() {
        return Err(Error::EmptyFitList);
    }
    let design = TorusCls::new(data, collection.largest(), iso)?;
    let fits = collection
        .models()
        .par_iter()
        .map(|m| design.fit(m, constraint))
        .collect::<Result<Vec<_>>>()?;
    let norm = (data.n() * data.lattice.size()) as f64;
    let (path, n_min_hat, jump, selected, degenerate) = calibrate(&fits, iso, norm)?;
    Ok(SelectionReport {
        path,
        n_min_hat,
        jump,
        selected,
        final_fit: fits[selected].clone(),
        fits,
        iso,
        degenerate,
    })
}

/// Slope heuristic on a plane window: every model is fit on the common
/// sublattice `Λ_𝓜` of the largest model, then the selected model is refit
/// on its own `Λ_m̂`.
pub fn slope_select_plane(
    data: &FieldObservations,
    collection: &ModelCollection,
    iso: bool,
    grid_resolution: usize,
) -> Result<SelectionReport> {
    if collection.is_empty() {
        return Err(Error::EmptyFitList);
    }
    let lattice = data.lattice;
    let common = sublattice_for_model(collection.largest(), &lattice)?;
    if common.len() < 100 {
        log::warn!(
            "common sublattice has only {} nodes; the slope heuristic is unreliable below 100",
            common.len()
        );
    }
    let design = PlaneCls::new(data, collection.largest(), &common, iso)?;
    let fits = collection
        .models()
        .par_iter()
        .map(|m| design.fit(m, grid_resolution))
        .collect::<Result<Vec<_>>>()?;
    let norm = (data.n() * common.len()) as f64;
    let (path, n_min_hat, jump, selected, degenerate) = calibrate(&fits, iso, norm)?;
    let m_hat = &collection.models()[selected];
    let own = sublattice_for_model(m_hat, &lattice)?;
    let final_fit = PlaneCls::new(data, m_hat, &own, iso)?.fit(m_hat, grid_resolution)?;
    Ok(SelectionReport {
        path,
        n_min_hat,
        jump,
        selected,
        final_fit,
        fits,
        iso,
        degenerate,
    })
}
