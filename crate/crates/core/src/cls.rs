//! Conditional least squares: the criterion in direct, FFT and sublattice
//! form, and per-model constrained estimation on tori and plane windows.
//!
//! Everything is expressed in class coordinates `θ = Σ_c β_c 1_c`, where the
//! criterion is the quadratic `γ(β) = a - 2 bᵀβ + βᵀHβ` and every eigenvalue
//! (or spectral density value) is linear in `β`. Class lists are ordered so
//! that a model's classes are a prefix of any larger model's, hence one
//! design built for the largest model serves the whole collection.

use std::collections::HashSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde_json::json;

use crate::error::{Error, Result};
use crate::lattice::{neighborhood_inside, LatticeSpec, NeighborhoodModel, Offset, Sublattice};
use crate::params::{ConstraintSpec, ThetaField};
use crate::qp::{solve_qp, QP_TOL};
use crate::simulate::FieldObservations;
use crate::spectral::{check_plane_validity, fft2_real, DEFAULT_GRID_RESOLUTION};

/// A fitted model: `θ̂` with the attained criterion and solver diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// `θ̂` with `sigma2` set to the attained criterion.
    pub theta: ThetaField,
    pub criterion: f64,
    pub model: NeighborhoodModel,
    /// One value per symmetry class of `model`.
    pub beta: Vec<f64>,
    pub iso: bool,
    pub on_boundary: bool,
    pub kkt_residual: f64,
    /// Set for plane fits (`Λ'`).
    pub sublattice: Option<Sublattice>,
    /// Normal equations were singular; `beta` is the minimum-norm solution.
    pub non_unique: bool,
}

impl FitResult {
    pub fn dim(&self) -> usize {
        self.model.dim(self.iso)
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "theta": self.theta.to_json(),
            "criterion": self.criterion,
            "radius": self.model.radius,
            "d_m": self.model.d_m,
            "d_m_iso": self.model.d_m_iso,
            "iso": self.iso,
            "beta": self.beta,
            "on_boundary": self.on_boundary,
            "kkt_residual": self.kkt_residual,
            "non_unique": self.non_unique,
            "sublattice_size": self.sublattice.as_ref().map(|s| s.len()),
        })
    }
}

fn check_torus(data: &FieldObservations) -> Result<()> {
    if !data.lattice.toroidal {
        return Err(Error::TorusRequired("toroidal criterion"));
    }
    Ok(())
}

fn check_shape(theta: &ThetaField, data: &FieldObservations) -> Result<()> {
    let (l, d) = (theta.lattice, data.lattice);
    if (l.p1, l.p2) != (d.p1, d.p2) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", d.p1, d.p2),
            got: format!("{}x{}", l.p1, l.p2),
        });
    }
    Ok(())
}

/// Mean squared conditional-regression residual with wrapped indices.
pub fn cls_direct(theta: &ThetaField, data: &FieldObservations) -> Result<f64> {
    check_torus(data)?;
    check_shape(theta, data)?;
    let (p1, p2) = (data.lattice.p1, data.lattice.p2);
    let nz: Vec<((usize, usize), f64)> = theta
        .coeffs
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|(ix, &v)| (ix, v))
        .collect();
    let mut total = 0.0;
    for k in 0..data.n() {
        let x = data.replication(k);
        for i in 0..p1 {
            for j in 0..p2 {
                let pred: f64 = nz.iter().map(|&((a, b), v)| v * x[[(i + a) % p1, (j + b) % p2]]).sum();
                let r = x[[i, j]] - pred;
                total += r * r;
            }
        }
    }
    Ok(total / (data.n() * p1 * p2) as f64)
}

/// Summed periodogram `P[i,j] = Σ_k |DFT(X_k)[i,j]|²` of torus data.
#[derive(Debug, Clone)]
pub struct Periodogram {
    pub lattice: LatticeSpec,
    pub n: usize,
    pub power: Array2<f64>,
}

impl Periodogram {
    pub fn new(data: &FieldObservations) -> Result<Self> {
        check_torus(data)?;
        let l = data.lattice;
        let mut power = Array2::zeros((l.p1, l.p2));
        for k in 0..data.n() {
            let f = fft2_real(&data.replication(k).to_owned());
            power.zip_mut_with(&f, |p, z| *p += z.norm_sqr());
        }
        Ok(Self {
            lattice: l,
            n: data.n(),
            power,
        })
    }

    /// `(1/(n p1² p2²)) Σ (1-λ)² P` given the eigenvalues `λ` of `θ`.
    pub fn criterion_from_eigen(&self, lambda: &Array2<f64>) -> f64 {
        let n2 = (self.lattice.size() as f64).powi(2);
        let s: f64 = self.power.iter().zip(lambda).map(|(p, l)| (1.0 - l).powi(2) * p).sum();
        s / (self.n as f64 * n2)
    }

    /// `(1/(n p1 p2)) Σ_k |X_k|²` by Parseval.
    pub fn second_moment(&self) -> f64 {
        self.power.sum() / (self.n as f64 * (self.lattice.size() as f64).powi(2))
    }
}

/// The criterion through the eigenvalues of `θ` and the data periodogram.
pub fn cls_fft(theta: &ThetaField, data: &FieldObservations) -> Result<f64> {
    check_torus(data)?;
    check_shape(theta, data)?;
    let pg = Periodogram::new(data)?;
    Ok(pg.criterion_from_eigen(&theta.eigenvalues()?.values))
}

/// `Σ_{o∈c} cos(2π (o1 i/p1 + o2 j/p2))` over the torus frequencies.
///
/// Angles are reduced with integer arithmetic so that `λ(f)` and `λ(-f)`
/// agree bitwise.
pub(crate) fn torus_class_basis(lattice: &LatticeSpec, class: &[Offset]) -> Array2<f64> {
    let (p1, p2) = (lattice.p1 as i64, lattice.p2 as i64);
    let nn = p1 * p2;
    Array2::from_shape_fn((lattice.p1, lattice.p2), |(i, j)| {
        class
            .iter()
            .map(|&(a, b)| {
                let k = (a as i64 * i as i64 * p2 + b as i64 * j as i64 * p1).rem_euclid(nn);
                let k = k.min(nn - k);
                (2.0 * PI * k as f64 / nn as f64).cos()
            })
            .sum()
    })
}

fn check_prefix(design: &[Vec<Offset>], model: &NeighborhoodModel, iso: bool) -> Result<usize> {
    let classes = model.classes(iso);
    if classes.len() > design.len() || classes.iter().zip(design).any(|(a, b)| a != b) {
        return Err(Error::InvalidParameter(format!(
            "model of radius {:.3} is not nested in the design's model",
            model.radius
        )));
    }
    Ok(classes.len())
}

/// Rows of `A` with duplicates (to `1e-12` relative) removed.
fn dedup_rows(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut seen = HashSet::new();
    rows.into_iter()
        .filter(|r| {
            let key: Vec<i64> = r.iter().map(|v| (v * 1e12).round() as i64).collect();
            seen.insert(key)
        })
        .collect()
}

fn leading(h: &DMatrix<f64>, b: &DVector<f64>, d: usize) -> (DMatrix<f64>, DVector<f64>) {
    (h.view((0, 0), (d, d)).into_owned(), b.rows(0, d).into_owned())
}

fn quad(a: f64, h: &DMatrix<f64>, b: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    a - 2.0 * b.dot(beta) + beta.dot(&(h * beta))
}

/// Minimum of the quadratic over `{Aβ <= c}`, starting from the feasible
/// origin. Returns `(β, on_boundary, kkt_residual)`.
fn constrained_min(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
) -> Result<(DVector<f64>, bool, f64)> {
    let d = h.nrows();
    let sol = solve_qp(&(h * 2.0), &(b * -2.0), a, c, DVector::zeros(d))?;
    let slack = c - a * &sol.x;
    let on_boundary = slack.iter().any(|&s| s <= QP_TOL);
    Ok((sol.x, on_boundary, sol.kkt_residual))
}

/// Unconstrained stationary point; minimum-norm when `H` is singular.
fn normal_equations(h: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, usize) {
    let d = h.nrows();
    if d == 0 {
        return (DVector::zeros(0), 0);
    }
    if let Some(ch) = h.clone().cholesky() {
        let x = ch.solve(b);
        let cond_ok = {
            let diag = ch.l_dirty().diagonal();
            let (mn, mx) = diag.iter().fold((f64::INFINITY, 0.0f64), |(a, m), &v| (a.min(v.abs()), m.max(v.abs())));
            mn > 1e-7 * mx
        };
        if cond_ok {
            return (x, d);
        }
    }
    let svd = h.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-12 * smax.max(1e-300) * d as f64;
    let rank = svd.rank(tol);
    (svd.solve(b, tol).expect("factors computed"), rank)
}

fn stationarity(h: &DMatrix<f64>, b: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let scale = b.amax().max(h.amax()).max(1e-300);
    (h * beta - b).amax() / scale
}

/// Cached CLS normal equations of torus data for a model and all its
/// sub-models in the same ordered collection.
#[derive(Debug, Clone)]
pub struct TorusCls {
    pub lattice: LatticeSpec,
    pub n: usize,
    pub iso: bool,
    pub periodogram: Periodogram,
    classes: Vec<Vec<Offset>>,
    /// `Λ_c`, one grid per class.
    pub(crate) basis: Vec<Array2<f64>>,
    a: f64,
    b: DVector<f64>,
    h: DMatrix<f64>,
    /// Distinct frequency rows `(Λ_c(f))_c`.
    rows: Vec<Vec<f64>>,
}

impl TorusCls {
    pub fn new(data: &FieldObservations, largest: &NeighborhoodModel, iso: bool) -> Result<Self> {
        let periodogram = Periodogram::new(data)?;
        Self::from_periodogram(periodogram, largest, iso)
    }

    pub fn from_periodogram(periodogram: Periodogram, largest: &NeighborhoodModel, iso: bool) -> Result<Self> {
        let lattice = periodogram.lattice;
        let classes = largest.classes(iso).to_vec();
        let basis: Vec<Array2<f64>> = classes.iter().map(|c| torus_class_basis(&lattice, c)).collect();
        let d = classes.len();
        let norm = periodogram.n as f64 * (lattice.size() as f64).powi(2);
        let p = &periodogram.power;
        let a = p.sum() / norm;
        let b = DVector::from_fn(d, |c, _| (&basis[c] * p).sum() / norm);
        let mut h = DMatrix::zeros(d, d);
        for c in 0..d {
            for e in c..d {
                let v = (&basis[c] * &basis[e] * p).sum() / norm;
                h[(c, e)] = v;
                h[(e, c)] = v;
            }
        }
        let rows = dedup_rows(
            (0..lattice.p1)
                .flat_map(|i| (0..lattice.p2).map(move |j| (i, j)))
                .map(|(i, j)| basis.iter().map(|g| g[[i, j]]).collect())
                .collect(),
        );
        Ok(Self {
            lattice,
            n: periodogram.n,
            iso,
            periodogram,
            classes,
            basis,
            a,
            b,
            h,
            rows,
        })
    }

    /// `γ(β)` for the first `β.len()` classes.
    pub fn criterion(&self, beta: &[f64]) -> f64 {
        let (h, b) = leading(&self.h, &self.b, beta.len());
        quad(self.a, &h, &b, &DVector::from_column_slice(beta))
    }

    /// `∇γ(β) = 2(Hβ - b)`.
    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let (h, b) = leading(&self.h, &self.b, beta.len());
        let g = (h * DVector::from_column_slice(beta) - b) * 2.0;
        g.iter().copied().collect()
    }

    /// Eigenvalues `λ(θ)` of the class combination `β`.
    pub fn eigenvalues(&self, beta: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros((self.lattice.p1, self.lattice.p2));
        for (g, &v) in self.basis.iter().zip(beta) {
            out.scaled_add(v, g);
        }
        out
    }

    /// `θ̂_m` (or `θ̂_{m,ρ}`) over the closure of the valid set.
    pub fn fit(&self, m: &NeighborhoodModel, constraint: &ConstraintSpec) -> Result<FitResult> {
        let d = check_prefix(&self.classes, m, self.iso)?;
        if self.a <= 0.0 {
            return Err(Error::RankDeficient { rank: 0, dim: d });
        }
        let (h, b) = leading(&self.h, &self.b, d);
        let mut beta = DVector::zeros(d);
        let mut on_boundary = false;
        let mut kkt = 0.0;
        if d > 0 {
            let ch = h.clone().cholesky();
            let Some(ch) = ch else {
                let rank = h.clone().svd(false, false).rank(1e-12 * h.amax());
                return Err(Error::RankDeficient { rank, dim: d });
            };
            beta = ch.solve(&b);
            let lam: Vec<f64> = self.rows.iter().map(|r| r[..d].iter().zip(beta.iter()).map(|(x, y)| x * y).sum()).collect();
            let lmax = lam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lmin = lam.iter().copied().fold(f64::INFINITY, f64::min);
            let feasible = lmax <= 1.0 && constraint.rho.is_none_or(|r| 1.0 - lmin <= r);
            if feasible {
                kkt = stationarity(&h, &b, &beta);
            } else {
                let (a, c) = self.constraint_system(d, constraint.rho);
                let (x, bd, res) = constrained_min(&h, &b, &a, &c)?;
                beta = x;
                on_boundary = bd;
                kkt = res;
            }
        }
        let beta: Vec<f64> = beta.iter().copied().collect();
        let criterion = self.criterion(&beta);
        let theta = ThetaField::from_class_values(self.lattice, m, self.iso, &beta, criterion.max(f64::MIN_POSITIVE));
        Ok(FitResult {
            theta,
            criterion,
            model: m.clone(),
            beta,
            iso: self.iso,
            on_boundary,
            kkt_residual: kkt,
            sublattice: None,
            non_unique: false,
        })
    }

    fn constraint_system(&self, d: usize, rho: Option<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let rows = dedup_rows(self.rows.iter().map(|r| r[..d].to_vec()).collect());
        let f = rows.len();
        let total = if rho.is_some() { 2 * f } else { f };
        let mut a = DMatrix::zeros(total, d);
        let mut c = DVector::zeros(total);
        for (k, r) in rows.iter().enumerate() {
            for e in 0..d {
                a[(k, e)] = r[e];
            }
            c[k] = 1.0;
            if let Some(rho) = rho {
                for e in 0..d {
                    a[(f + k, e)] = -r[e];
                }
                c[f + k] = rho - 1.0;
            }
        }
        (a, c)
    }
}

/// `θ̂_m` on a torus for a single model.
pub fn fit_torus(
    m: &NeighborhoodModel,
    data: &FieldObservations,
    iso: bool,
    constraint: &ConstraintSpec,
) -> Result<FitResult> {
    TorusCls::new(data, m, iso)?.fit(m, constraint)
}

fn check_plane(data: &FieldObservations) -> Result<()> {
    if data.lattice.toroidal {
        return Err(Error::PlaneRequired("sublattice criterion"));
    }
    Ok(())
}

fn check_sublattice(lattice: &LatticeSpec, offsets: &[Offset], sub: &Sublattice) -> Result<()> {
    if sub.is_empty() {
        return Err(Error::EmptySublattice("no regression rows".into()));
    }
    for &x in &sub.nodes {
        if x.0 >= lattice.p1 || x.1 >= lattice.p2 || !neighborhood_inside(lattice, offsets, x) {
            return Err(Error::SublatticeNotContained(x.0, x.1));
        }
    }
    Ok(())
}

/// Mean squared residual over `Λ'` without wrapping; `θ` must be supported
/// on `m` and `Λ' ⊆ Λ_m`.
pub fn cls_sublattice(
    theta: &ThetaField,
    data: &FieldObservations,
    m: &NeighborhoodModel,
    sub: &Sublattice,
) -> Result<f64> {
    check_plane(data)?;
    check_shape(theta, data)?;
    check_sublattice(&data.lattice, &m.offsets, sub)?;
    let nz = theta.nonzero();
    if let Some((o, _)) = nz.iter().find(|(o, _)| !m.contains(*o)) {
        return Err(Error::InvalidParameter(format!(
            "coefficient at offset {o:?} lies outside the model"
        )));
    }
    let mut total = 0.0;
    for k in 0..data.n() {
        let x = data.replication(k);
        for &(i, j) in &sub.nodes {
            let pred: f64 = nz
                .iter()
                .map(|&((a, b), v)| v * x[[(i as i64 + a as i64) as usize, (j as i64 + b as i64) as usize]])
                .sum();
            let r = x[[i, j]] - pred;
            total += r * r;
        }
    }
    Ok(total / (data.n() * sub.len()) as f64)
}

/// `Σ_{o∈c} cos(o·ω)` at the grid frequency `ω = 2π (u, v) / res`.
fn plane_class_row(classes: &[Vec<Offset>], d: usize, res: usize, (u, v): (usize, usize)) -> Vec<f64> {
    let r = res as i64;
    classes[..d]
        .iter()
        .map(|class| {
            class
                .iter()
                .map(|&(a, b)| {
                    let k = (a as i64 * u as i64 + b as i64 * v as i64).rem_euclid(r);
                    let k = k.min(r - k);
                    (2.0 * PI * k as f64 / res as f64).cos()
                })
                .sum()
        })
        .collect()
}

/// Cached sublattice normal equations of plane data on a fixed `Λ'`.
#[derive(Debug, Clone)]
pub struct PlaneCls {
    pub lattice: LatticeSpec,
    pub n: usize,
    pub iso: bool,
    pub sublattice: Sublattice,
    classes: Vec<Vec<Offset>>,
    a: f64,
    b: DVector<f64>,
    h: DMatrix<f64>,
}

const MAX_CUTTING_ROUNDS: usize = 60;
const CUTS_PER_ROUND: usize = 4;

impl PlaneCls {
    pub fn new(data: &FieldObservations, largest: &NeighborhoodModel, sub: &Sublattice, iso: bool) -> Result<Self> {
        check_plane(data)?;
        let lattice = data.lattice;
        check_sublattice(&lattice, &largest.offsets, sub)?;
        let classes = largest.classes(iso).to_vec();
        let d = classes.len();
        let rows = data.n() * sub.len();
        let mut a = 0.0;
        let mut b = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let mut z = vec![0.0; d];
        for k in 0..data.n() {
            let x = data.replication(k);
            for &(i, j) in &sub.nodes {
                for (c, class) in classes.iter().enumerate() {
                    z[c] = class
                        .iter()
                        .map(|&(di, dj)| x[[(i as i64 + di as i64) as usize, (j as i64 + dj as i64) as usize]])
                        .sum();
                }
                let y = x[[i, j]];
                a += y * y;
                for c in 0..d {
                    b[c] += y * z[c];
                    for e in c..d {
                        h[(c, e)] += z[c] * z[e];
                    }
                }
            }
        }
        for c in 0..d {
            for e in 0..c {
                h[(c, e)] = h[(e, c)];
            }
        }
        let rows = rows as f64;
        Ok(Self {
            lattice,
            n: data.n(),
            iso,
            sublattice: sub.clone(),
            classes,
            a: a / rows,
            b: b / rows,
            h: h / rows,
        })
    }

    pub fn criterion(&self, beta: &[f64]) -> f64 {
        let (h, b) = leading(&self.h, &self.b, beta.len());
        quad(self.a, &h, &b, &DVector::from_column_slice(beta))
    }

    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let (h, b) = leading(&self.h, &self.b, beta.len());
        let g = (h * DVector::from_column_slice(beta) - b) * 2.0;
        g.iter().copied().collect()
    }

    fn coeffs(&self, beta: &[f64]) -> Vec<(Offset, f64)> {
        self.classes
            .iter()
            .zip(beta)
            .flat_map(|(c, &v)| c.iter().map(move |&o| (o, v)))
            .collect()
    }

    /// `θ̂_m^{Λ'}` over the closure of the positive-density set, enforced on
    /// a `res × res` frequency grid by cutting planes.
    pub fn fit(&self, m: &NeighborhoodModel, res: usize) -> Result<FitResult> {
        let d = check_prefix(&self.classes, m, self.iso)?;
        if self.a <= 0.0 {
            return Err(Error::RankDeficient { rank: 0, dim: d });
        }
        let (h, b) = leading(&self.h, &self.b, d);
        let (mut beta, rank) = normal_equations(&h, &b);
        let mut non_unique = rank < d;
        if self.n * self.sublattice.len() < d || self.sublattice.len() < d {
            log::warn!(
                "sublattice of {} nodes is smaller than the model dimension {d}; the estimator may not be unique",
                self.sublattice.len()
            );
            non_unique = true;
        }
        let mut kkt = if d > 0 { stationarity(&h, &b, &beta) } else { 0.0 };
        let mut on_boundary = false;
        let beta_vec: Vec<f64> = beta.iter().copied().collect();
        if d > 0 && check_plane_validity(&self.coeffs(&beta_vec), res).grid_min < 0.0 {
            // a tiny ridge keeps the KKT systems nonsingular when H is
            let h_qp = if rank < d {
                &h + DMatrix::identity(d, d) * (1e-8 * h.diagonal().amax().max(1e-300))
            } else {
                h.clone()
            };
            let mut cuts: Vec<Vec<f64>> = Vec::new();
            let mut converged = false;
            for _ in 0..MAX_CUTTING_ROUNDS {
                let current: Vec<f64> = beta.iter().copied().collect();
                let grid = crate::spectral::plane_density_grid(&self.coeffs(&current), res);
                let mut worst: Vec<((usize, usize), f64)> = grid
                    .as_slice()
                    .expect("standard layout")
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v < -QP_TOL)
                    .map(|(k, &v)| ((k / res, k % res), v))
                    .collect();
                if worst.is_empty() {
                    converged = true;
                    break;
                }
                worst.sort_by(|x, y| x.1.total_cmp(&y.1));
                for &(ix, _) in worst.iter().take(CUTS_PER_ROUND) {
                    cuts.push(plane_class_row(&self.classes, d, res, ix));
                }
                cuts = dedup_rows(cuts);
                let a = DMatrix::from_fn(cuts.len(), d, |r, c| cuts[r][c]);
                let c = DVector::from_element(cuts.len(), 1.0);
                let (x, bd, res_kkt) = constrained_min(&h_qp, &b, &a, &c)?;
                beta = x;
                on_boundary = bd;
                kkt = res_kkt;
            }
            if !converged {
                return Err(Error::NoConvergence("spectral cutting planes", MAX_CUTTING_ROUNDS));
            }
        }
        let beta: Vec<f64> = beta.iter().copied().collect();
        let criterion = self.criterion(&beta);
        let theta = ThetaField::from_class_values(self.lattice, m, self.iso, &beta, criterion.max(f64::MIN_POSITIVE));
        Ok(FitResult {
            theta,
            criterion,
            model: m.clone(),
            beta,
            iso: self.iso,
            on_boundary,
            kkt_residual: kkt,
            sublattice: Some(self.sublattice.clone()),
            non_unique,
        })
    }
}

/// `θ̂_m^{Λ'}` for a single model on a plane window.
pub fn fit_plane(
    m: &NeighborhoodModel,
    data: &FieldObservations,
    sub: &Sublattice,
    iso: bool,
    grid_resolution: usize,
) -> Result<FitResult> {
    PlaneCls::new(data, m, sub, iso)?.fit(m, grid_resolution)
}

/// [`fit_plane`] with the default frequency grid.
pub fn fit_plane_default(m: &NeighborhoodModel, data: &FieldObservations, sub: &Sublattice, iso: bool) -> Result<FitResult> {
    fit_plane(m, data, sub, iso, DEFAULT_GRID_RESOLUTION)
}
