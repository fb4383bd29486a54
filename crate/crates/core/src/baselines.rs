//! Competing estimators: exact Gaussian likelihood on the torus with AIC or
//! BIC selection, and the geostatistical pipeline (empirical variogram,
//! weighted least-squares fit, ordinary kriging at the center node).

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::cls::{torus_class_basis, Periodogram};
use crate::error::{Error, Result};
use crate::lattice::{LatticeSpec, ModelCollection, NeighborhoodModel};
use crate::params::ThetaField;
use crate::simulate::{correlation_value, AnisotropySpec, CorrelationFamily, CorrelationModel, FieldObservations};

/// Feasibility margin kept on `max λ` during likelihood maximization.
pub const MLE_MARGIN: f64 = 1e-8;
const MLE_MAX_ITER: usize = 200;

/// Default kriging window side (120 neighbors).
pub const DEFAULT_KRIGING_WINDOW: usize = 11;

/// Exact log-likelihood of all replications under `N(0, σ² (I - C(θ))⁻¹)`.
pub fn torus_loglik(theta: &ThetaField, sigma2: f64, data: &FieldObservations) -> Result<f64> {
    if !data.lattice.toroidal {
        return Err(Error::TorusRequired("exact likelihood"));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    let lam = theta.eigenvalues()?;
    if lam.max() >= 1.0 {
        return Err(Error::InvalidTheta { min_gap: 1.0 - lam.max() });
    }
    let pg = Periodogram::new(data)?;
    Ok(loglik_from_eigen(&pg, &lam.values, sigma2))
}

fn loglik_from_eigen(pg: &Periodogram, lam: &Array2<f64>, sigma2: f64) -> f64 {
    let nn = pg.lattice.size() as f64;
    let n = pg.n as f64;
    let logdet: f64 = lam.iter().map(|l| (1.0 - l).ln()).sum();
    let quad: f64 = lam.iter().zip(&pg.power).map(|(l, p)| (1.0 - l) * p).sum::<f64>() / nn;
    -0.5 * n * nn * (2.0 * std::f64::consts::PI * sigma2).ln() + 0.5 * n * logdet - quad / (2.0 * sigma2)
}

/// Maximum-likelihood estimate within one model.
#[derive(Debug, Clone)]
pub struct LoglikResult {
    pub theta: ThetaField,
    pub sigma2_hat: f64,
    pub loglik: f64,
    pub model: NeighborhoodModel,
    pub beta: Vec<f64>,
    pub iso: bool,
    pub converged: bool,
    pub iterations: usize,
}

impl LoglikResult {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "radius": self.model.radius,
            "d": self.model.dim(self.iso),
            "beta": self.beta,
            "sigma2_hat": self.sigma2_hat,
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "theta": self.theta.to_json(),
        })
    }
}

/// Class bases and periodogram shared by the likelihood fits of a
/// collection.
#[derive(Debug, Clone)]
pub struct MleDesign {
    periodogram: Periodogram,
    classes: Vec<Vec<crate::lattice::Offset>>,
    basis: Vec<Array2<f64>>,
    iso: bool,
}

impl MleDesign {
    pub fn new(data: &FieldObservations, largest: &NeighborhoodModel, iso: bool) -> Result<Self> {
        let periodogram = Periodogram::new(data)?;
        let classes = largest.classes(iso).to_vec();
        let basis = classes.iter().map(|c| torus_class_basis(&data.lattice, c)).collect();
        Ok(Self {
            periodogram,
            classes,
            basis,
            iso,
        })
    }

    /// Maximizes the likelihood over `Θ_m⁺ × (0, ∞)`.
    ///
    /// In the natural parameters `τ = 1/σ²`, `φ = β/σ²` the log-likelihood
    /// is `(n/2) Σ log μ_f - (1/(2N)) Σ μ_f P_f + const` with
    /// `μ_f = τ - Σ_c φ_c Λ_c(f)`, which is concave; damped Newton steps
    /// that keep `λ < 1 - margin` therefore reach the global maximum.
    pub fn fit(&self, m: &NeighborhoodModel) -> Result<LoglikResult> {
        let d = m.dim(self.iso);
        if m.classes(self.iso) != &self.classes[..d] {
            return Err(Error::InvalidParameter(
                "model classes are not a prefix of the largest model's classes".into(),
            ));
        }
        let pg = &self.periodogram;
        let lattice = pg.lattice;
        let nn = lattice.size() as f64;
        let n = pg.n as f64;
        // f(x) = -ℓ / (n N) up to a constant, in x = (τ, φ)
        let p: Vec<f64> = pg.power.iter().map(|v| v / (n * nn)).collect();
        let psum: f64 = p.iter().sum();
        if !(psum > 0.0) {
            return Err(Error::RankDeficient { rank: 0, dim: d + 1 });
        }
        let rows: Vec<Vec<f64>> = (0..d).map(|c| self.basis[c].iter().copied().collect()).collect();
        let nf = p.len();
        let mu_of = |x: &DVector<f64>| -> Vec<f64> {
            let mut mu = vec![x[0]; nf];
            for c in 0..d {
                for (m, r) in mu.iter_mut().zip(&rows[c]) {
                    *m -= x[c + 1] * r;
                }
            }
            mu
        };
        let objective = |mu: &[f64]| -> f64 {
            mu.iter().zip(&p).map(|(m, pp)| m * pp / nn - m.ln() / nn).sum::<f64>() * 0.5
        };
        let feasible = |x: &DVector<f64>, mu: &[f64]| mu.iter().all(|&m| m >= MLE_MARGIN * x[0]) && x[0] > 0.0;

        let mut x = DVector::zeros(d + 1);
        x[0] = nn / psum;
        let mut mu = mu_of(&x);
        let mut fx = objective(&mu);
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..MLE_MAX_ITER {
            iterations = it;
            let mut g = DVector::<f64>::zeros(d + 1);
            let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
            let mut a = vec![0.0; d + 1];
            for f in 0..nf {
                a[0] = 1.0;
                for c in 0..d {
                    a[c + 1] = -rows[c][f];
                }
                let w = (p[f] - 1.0 / mu[f]) / (2.0 * nn);
                let w2 = 1.0 / (2.0 * nn * mu[f] * mu[f]);
                for r in 0..=d {
                    g[r] += w * a[r];
                    for s in r..=d {
                        h[(r, s)] += w2 * a[r] * a[s];
                    }
                }
            }
            h.fill_lower_triangle_with_upper_triangle();
            let step = match h.clone().cholesky() {
                Some(ch) => -ch.solve(&g),
                None => -&g,
            };
            let decrement = -g.dot(&step);
            if decrement <= 1e-20 {
                converged = true;
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let xn = &x + t * &step;
                let mun = mu_of(&xn);
                if feasible(&xn, &mun) {
                    let fnew = objective(&mun);
                    if fnew <= fx - 1e-4 * t * decrement {
                        x = xn;
                        mu = mun;
                        fx = fnew;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                // stuck against the margin or at machine precision
                converged = decrement <= 1e-14 * fx.abs().max(1.0);
                break;
            }
        }
        if !converged {
            log::warn!("likelihood maximization stopped after {iterations} iterations");
        }
        let sigma2 = 1.0 / x[0];
        let beta: Vec<f64> = (0..d).map(|c| x[c + 1] * sigma2).collect();
        let theta = ThetaField::from_class_values(lattice, m, self.iso, &beta, sigma2);
        let mut lam = Array2::zeros((lattice.p1, lattice.p2));
        for (g, &v) in self.basis.iter().zip(&beta) {
            lam.scaled_add(v, g);
        }
        let loglik = loglik_from_eigen(pg, &lam, sigma2);
        Ok(LoglikResult {
            theta,
            sigma2_hat: sigma2,
            loglik,
            model: m.clone(),
            beta,
            iso: self.iso,
            converged,
            iterations,
        })
    }
}

/// Maximum-likelihood fit of one model on torus data.
pub fn fit_mle(m: &NeighborhoodModel, data: &FieldObservations, iso: bool) -> Result<LoglikResult> {
    MleDesign::new(data, m, iso)?.fit(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoCriterion {
    Aic,
    Bic,
}

impl InfoCriterion {
    /// Per-parameter penalty: 2 or `log(p1 p2)`.
    pub fn multiplier(&self, lattice: &LatticeSpec) -> f64 {
        match self {
            InfoCriterion::Aic => 2.0,
            InfoCriterion::Bic => (lattice.size() as f64).ln(),
        }
    }
}

impl FromStr for InfoCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Self::Aic),
            "bic" => Ok(Self::Bic),
            other => Err(Error::InvalidParameter(format!("unknown criterion '{other}'"))),
        }
    }
}

/// Likelihood fits of every model of a collection on torus data.
pub fn fit_mle_collection(data: &FieldObservations, collection: &ModelCollection, iso: bool) -> Result<Vec<LoglikResult>> {
    use rayon::prelude::*;
    if collection.is_empty() {
        return Err(Error::EmptyFitList);
    }
    let design = MleDesign::new(data, collection.largest(), iso)?;
    collection.models().par_iter().map(|m| design.fit(m)).collect()
}

/// Index minimizing `-2 ℓ + c d_m` over precomputed fits, ties towards the
/// smaller dimension.
pub fn select_by_criterion(fits: &[LoglikResult], criterion: InfoCriterion, lattice: &LatticeSpec) -> Result<usize> {
    if fits.is_empty() {
        return Err(Error::EmptyFitList);
    }
    let c = criterion.multiplier(lattice);
    let points: Vec<(usize, f64)> = fits.iter().map(|f| (f.model.dim(f.iso), -2.0 * f.loglik)).collect();
    let pen: Vec<f64> = points.iter().map(|p| c * p.0 as f64).collect();
    Ok(crate::select::argmin_penalized(&points, &pen))
}

/// AIC or BIC selection within a collection.
pub fn aic_bic_select(
    data: &FieldObservations,
    collection: &ModelCollection,
    iso: bool,
    criterion: InfoCriterion,
) -> Result<(usize, LoglikResult)> {
    let fits = fit_mle_collection(data, collection, iso)?;
    let k = select_by_criterion(&fits, criterion, &data.lattice)?;
    Ok((k, fits[k].clone()))
}

/// One lag-distance class of the empirical variogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VariogramBin {
    /// Mean pair distance within the bin.
    pub lag: f64,
    pub semivariance: f64,
    pub count: usize,
}

/// `(max_lag, n_bins)` with unit-width bins up to half the window.
pub fn default_variogram_bins(lattice: &LatticeSpec) -> (f64, usize) {
    let half = (lattice.p1.min(lattice.p2) / 2).max(3);
    (half as f64, half)
}

/// Robust modulus estimator of Hawkes and Cressie, pooled over
/// replications, in `n_bins` equal-width distance classes on `(0, max_lag]`.
pub fn empirical_variogram(data: &FieldObservations, max_lag: f64, n_bins: usize) -> Result<Vec<VariogramBin>> {
    empirical_variogram_aniso(data, max_lag, n_bins, None)
}

/// As [`empirical_variogram`], with lags measured in the deformed metric of
/// a known geometric anisotropy.
pub fn empirical_variogram_aniso(
    data: &FieldObservations,
    max_lag: f64,
    n_bins: usize,
    aniso: Option<&AnisotropySpec>,
) -> Result<Vec<VariogramBin>> {
    if data.lattice.toroidal {
        return Err(Error::PlaneRequired("empirical variogram"));
    }
    if n_bins < 3 || !(max_lag > 0.0) {
        return Err(Error::InvalidParameter("need at least 3 bins and a positive max lag".into()));
    }
    let (p1, p2) = (data.lattice.p1 as i64, data.lattice.p2 as i64);
    let width = max_lag / n_bins as f64;
    let mut root_sum = vec![0.0; n_bins];
    let mut dist_sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    // the deformed metric never stretches a lag by more than the ratio
    let stretch = aniso.map_or(1.0, |a| a.ratio);
    let reach = (max_lag * stretch).floor() as i64;
    for di in 0..=reach.min(p1 - 1) {
        for dj in -reach.min(p2 - 1)..=reach.min(p2 - 1) {
            if di == 0 && dj <= 0 {
                continue;
            }
            let dist = match aniso {
                Some(a) => a.distance((di as f64, dj as f64)),
                None => ((di * di + dj * dj) as f64).sqrt(),
            };
            if dist > max_lag {
                continue;
            }
            let bin = (((dist / width).ceil() as usize).max(1) - 1).min(n_bins - 1);
            for k in 0..data.n() {
                let x = data.replication(k);
                for i in 0..p1 - di {
                    for j in (-dj).max(0)..(p2 - dj.max(0)) {
                        let a = x[[i as usize, j as usize]];
                        let b = x[[(i + di) as usize, (j + dj) as usize]];
                        root_sum[bin] += (a - b).abs().sqrt();
                        dist_sum[bin] += dist;
                        count[bin] += 1;
                    }
                }
            }
        }
    }
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        if count[b] == 0 {
            log::warn!("variogram bin {b} is empty and dropped");
            continue;
        }
        let nh = count[b] as f64;
        let two_gamma = (root_sum[b] / nh).powi(4) / (0.457 + 0.494 / nh);
        bins.push(VariogramBin {
            lag: dist_sum[b] / nh,
            semivariance: 0.5 * two_gamma,
            count: count[b],
        });
    }
    Ok(bins)
}

/// Parametric variogram fitted to empirical bins.
#[derive(Debug, Clone, Serialize)]
pub struct VariogramFit {
    pub family: CorrelationFamily,
    pub range_hat: f64,
    pub variance_hat: f64,
    pub kappa_hat: Option<f64>,
    pub bins: Vec<VariogramBin>,
    /// `Σ N_h (γ̂/γ - 1)²` at the solution.
    pub objective: f64,
    pub rounds: usize,
    pub converged: bool,
}

impl VariogramFit {
    pub fn model(&self) -> CorrelationModel {
        CorrelationModel {
            family: self.family,
            range: self.range_hat,
            kappa: self.kappa_hat.unwrap_or(0.5),
            variance: self.variance_hat,
        }
    }
}

const RANGE_BOUNDS: (f64, f64) = (1e-2, 1e3);
const KAPPA_BOUNDS: (f64, f64) = (0.05, 20.0);
const WLS_ROUNDS: usize = 20;
const WLS_TOL: f64 = 1e-6;

fn shape_model(family: CorrelationFamily, range: f64, kappa: f64) -> CorrelationModel {
    CorrelationModel {
        family,
        range,
        kappa,
        variance: 1.0,
    }
}

/// Fits `variance · (1 - ρ(h; range[, κ]))` by Cressie's weighted least
/// squares. The variance is profiled out in closed form; the remaining
/// log-parameters are optimized by box-constrained BFGS from 5 starts.
/// A reweighting loop then iterates weights `N_h / γ(h)²` from the previous
/// solution until the parameters move by less than `1e-6`.
pub fn fit_variogram_wls(bins: &[VariogramBin], family: CorrelationFamily, fix_kappa: Option<f64>) -> Result<VariogramFit> {
    if bins.len() < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 nonempty bins, got {}", bins.len())));
    }
    if bins.iter().all(|b| b.semivariance <= 0.0) {
        return Err(Error::Domain("empirical variogram is identically zero".into()));
    }
    let estimate_kappa = family == CorrelationFamily::Matern && fix_kappa.is_none();
    let kappa_fixed = fix_kappa.unwrap_or(0.5);
    let max_lag = bins.iter().map(|b| b.lag).fold(0.0, f64::max);
    let unpack = |z: &[f64]| -> (f64, f64) {
        let kappa = if estimate_kappa { z[1].exp() } else { kappa_fixed };
        (z[0].exp(), kappa)
    };
    let shapes = |z: &[f64]| -> Vec<f64> {
        let (r, k) = unpack(z);
        let m = shape_model(family, r, k);
        bins.iter().map(|b| 1.0 - m.correlation(b.lag)).collect()
    };
    // direct Cressie objective with profiled 1/variance
    let cressie = |z: &[f64]| -> (f64, f64) {
        let g = shapes(z);
        let (mut s1, mut s2) = (0.0, 0.0);
        for (b, gi) in bins.iter().zip(&g) {
            if *gi <= 0.0 {
                return (f64::INFINITY, 1.0);
            }
            let q = b.semivariance / gi;
            s1 += b.count as f64 * q;
            s2 += b.count as f64 * q * q;
        }
        let t = if s2 > 0.0 { s1 / s2 } else { 1.0 };
        let obj: f64 = bins.iter().zip(&g).map(|(b, gi)| b.count as f64 * (t * b.semivariance / gi - 1.0).powi(2)).sum();
        (obj, 1.0 / t)
    };
    let lo = {
        let mut v = vec![RANGE_BOUNDS.0.ln()];
        if estimate_kappa {
            v.push(KAPPA_BOUNDS.0.ln());
        }
        v
    };
    let hi = {
        let mut v = vec![(RANGE_BOUNDS.1 * max_lag.max(1.0)).ln()];
        if estimate_kappa {
            v.push(KAPPA_BOUNDS.1.ln());
        }
        v
    };
    let starts: Vec<Vec<f64>> = [0.1, 0.25, 0.5, 1.0, 2.0]
        .iter()
        .enumerate()
        .map(|(s, f)| {
            let mut z = vec![(f * max_lag.max(1.0)).ln()];
            if estimate_kappa {
                z.push([0.5f64, 1.0, 2.0, 0.3, 4.0][s].ln());
            }
            z
        })
        .collect();
    let best_of = |obj: &dyn Fn(&[f64]) -> f64| -> Option<(Vec<f64>, f64)> {
        starts
            .iter()
            .filter_map(|z0| {
                let z = minimize_box(obj, z0, &lo, &hi);
                let f = obj(&z);
                f.is_finite().then_some((z, f))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
    };
    let Some((mut z, _)) = best_of(&|z: &[f64]| cressie(z).0) else {
        return Err(Error::NoConvergence("variogram fit", starts.len()));
    };
    let mut variance = cressie(&z).1;
    let mut rounds = 0;
    let mut converged = false;
    while rounds < WLS_ROUNDS {
        rounds += 1;
        let g = shapes(&z);
        let w: Vec<f64> = bins.iter().zip(&g).map(|(b, gi)| b.count as f64 / (variance * gi).powi(2)).collect();
        let weighted = |zz: &[f64]| -> (f64, f64) {
            let g = shapes(zz);
            let num: f64 = bins.iter().zip(&g).zip(&w).map(|((b, gi), wi)| wi * b.semivariance * gi).sum();
            let den: f64 = g.iter().zip(&w).map(|(gi, wi)| wi * gi * gi).sum();
            if !(den > 0.0) {
                return (f64::INFINITY, 1.0);
            }
            let v = (num / den).max(f64::MIN_POSITIVE);
            let obj = bins.iter().zip(&g).zip(&w).map(|((b, gi), wi)| wi * (b.semivariance - v * gi).powi(2)).sum();
            (obj, v)
        };
        let znew = minimize_box(&|zz: &[f64]| weighted(zz).0, &z, &lo, &hi);
        let (fnew, vnew) = weighted(&znew);
        if !fnew.is_finite() {
            break;
        }
        let change = znew.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold((vnew / variance).ln().abs(), f64::max);
        z = znew;
        variance = vnew;
        if change < WLS_TOL {
            converged = true;
            break;
        }
    }
    let (range_hat, kappa) = unpack(&z);
    let g = shapes(&z);
    let objective = bins.iter().zip(&g).map(|(b, gi)| b.count as f64 * (b.semivariance / (variance * gi) - 1.0).powi(2)).sum();
    Ok(VariogramFit {
        family,
        range_hat,
        variance_hat: variance,
        kappa_hat: (family == CorrelationFamily::Matern).then_some(kappa),
        bins: bins.to_vec(),
        objective,
        rounds,
        converged,
    })
}

/// Projected BFGS with central-difference gradients on a box.
fn minimize_box(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let d = x0.len();
    let clamp = |x: &mut Vec<f64>| {
        for k in 0..d {
            x[k] = x[k].clamp(lo[k], hi[k]);
        }
    };
    let grad = |x: &[f64]| -> DVector<f64> {
        DVector::from_fn(d, |k, _| {
            let h = 1e-6 * x[k].abs().max(1.0);
            let (mut a, mut b) = (x.to_vec(), x.to_vec());
            a[k] = (x[k] + h).min(hi[k]);
            b[k] = (x[k] - h).max(lo[k]);
            (f(&a) - f(&b)) / (a[k] - b[k])
        })
    };
    let mut x = x0.to_vec();
    clamp(&mut x);
    let mut fx = f(&x);
    if !fx.is_finite() {
        return x;
    }
    let mut g = grad(&x);
    let mut binv = DMatrix::<f64>::identity(d, d);
    for _ in 0..200 {
        // freeze coordinates pinned at a bound with outward gradient
        let free: Vec<bool> = (0..d)
            .map(|k| !((x[k] <= lo[k] && g[k] > 0.0) || (x[k] >= hi[k] && g[k] < 0.0)))
            .collect();
        let mut dir = -(&binv * &g);
        for k in 0..d {
            if !free[k] {
                dir[k] = 0.0;
            }
        }
        if dir.dot(&g) >= 0.0 {
            binv = DMatrix::identity(d, d);
            dir = -g.clone();
            for k in 0..d {
                if !free[k] {
                    dir[k] = 0.0;
                }
            }
        }
        if dir.amax() < 1e-12 {
            break;
        }
        let mut t = 1.0;
        let mut moved = None;
        for _ in 0..50 {
            let mut xn: Vec<f64> = (0..d).map(|k| x[k] + t * dir[k]).collect();
            clamp(&mut xn);
            let fnew = f(&xn);
            let decrease: f64 = (0..d).map(|k| g[k] * (xn[k] - x[k])).sum();
            if fnew.is_finite() && fnew <= fx + 1e-4 * decrease {
                moved = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = moved else { break };
        let gn = grad(&xn);
        let s = DVector::from_fn(d, |k, _| xn[k] - x[k]);
        let y = &gn - &g;
        let sy = s.dot(&y);
        let done = (fx - fnew).abs() <= 1e-14 * fx.abs().max(1e-300) && s.amax() < 1e-10;
        x = xn;
        fx = fnew;
        g = gn;
        if sy > 1e-16 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let left = &i - rho * &s * y.transpose();
            let right = &i - rho * &y * s.transpose();
            binv = &left * &binv * &right + rho * &s * s.transpose();
        }
        if done || s.amax() < 1e-12 {
            break;
        }
    }
    x
}

/// Ordinary-kriging weights of the center of a `k x k` window from the other
/// `k² - 1` nodes, keyed by offset, and the kriging variance.
pub fn kriging_weights(
    model: &CorrelationModel,
    k: usize,
    aniso: Option<&AnisotropySpec>,
) -> Result<(Vec<((i64, i64), f64)>, f64)> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::InvalidParameter(format!("kriging window must be odd and >= 3, got {k}")));
    }
    model.validate()?;
    // weights depend on the correlation only; solve with unit variance
    let unit = CorrelationModel {
        variance: 1.0,
        ..*model
    };
    let h = (k / 2) as i64;
    let offsets: Vec<(i64, i64)> = (-h..=h)
        .flat_map(|i| (-h..=h).map(move |j| (i, j)))
        .filter(|&o| o != (0, 0))
        .collect();
    let m = offsets.len();
    let cov = |a: (i64, i64), b: (i64, i64)| correlation_value(&unit, ((b.0 - a.0) as f64, (b.1 - a.1) as f64), aniso);
    let mut sys = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for r in 0..m {
        for c in r..m {
            let v = cov(offsets[r], offsets[c]);
            sys[(r, c)] = v;
            sys[(c, r)] = v;
        }
        sys[(r, m)] = 1.0;
        sys[(m, r)] = 1.0;
        rhs[r] = cov(offsets[r], (0, 0));
    }
    rhs[m] = 1.0;
    let cmat = sys.view((0, 0), (m, m)).into_owned();
    let sv = cmat.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-13 * smax) {
        return Err(Error::SingularKriging { window: k });
    }
    let sol = sys.lu().solve(&rhs).ok_or(Error::SingularKriging { window: k })?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularKriging { window: k });
    }
    let w: Vec<((i64, i64), f64)> = offsets.iter().copied().zip(sol.iter().copied()).collect();
    // σ²_OK = C(0) - wᵀc0 - μ with the system's sign convention
    let var = model.variance * (1.0 - (0..m).map(|r| sol[r] * rhs[r]).sum::<f64>() - sol[m]);
    Ok((w, var))
}

/// `θ̂^V`: kriging weights of the fitted model on a `k x k` window, as
/// coefficients on `lattice` (center weight 0).
pub fn kriging_theta(
    fit: &VariogramFit,
    lattice: &LatticeSpec,
    k: usize,
    aniso: Option<&AnisotropySpec>,
) -> Result<ThetaField> {
    kriging_theta_for_model(&fit.model(), lattice, k, aniso)
}

pub fn kriging_theta_for_model(
    model: &CorrelationModel,
    lattice: &LatticeSpec,
    k: usize,
    aniso: Option<&AnisotropySpec>,
) -> Result<ThetaField> {
    if k > lattice.p1 || k > lattice.p2 {
        return Err(Error::InvalidParameter(format!(
            "kriging window {k} exceeds the {}x{} lattice",
            lattice.p1, lattice.p2
        )));
    }
    let (w, var) = kriging_weights(model, k, aniso)?;
    let mut coeffs = Array2::zeros((lattice.p1, lattice.p2));
    for &((i, j), v) in &w {
        let (a, b) = lattice.wrap(i, j);
        coeffs[[a, b]] += 0.5 * v;
        let (a, b) = lattice.wrap(-i, -j);
        coeffs[[a, b]] += 0.5 * v;
    }
    ThetaField::new(*lattice, coeffs, var.max(f64::MIN_POSITIVE), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cls::fit_torus;
    use crate::lattice::build_model_collection;
    use crate::params::{build_circulant, ConstraintSpec};
    use crate::simulate::{make_theta_phi, sample_plane_window, sample_torus_gmrf};
    use crate::testutil::random_symmetric;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_loglik(theta: &ThetaField, sigma2: f64, data: &FieldObservations) -> f64 {
        let c = build_circulant(theta).unwrap();
        let nn = theta.lattice.size();
        let prec = (DMatrix::identity(nn, nn) - c) / sigma2;
        let logdet_prec = prec.clone().cholesky().unwrap().l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
        (0..data.n())
            .map(|k| {
                let x = DVector::from_iterator(nn, data.replication(k).iter().copied());
                -0.5 * nn as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * logdet_prec - 0.5 * x.dot(&(&prec * &x))
            })
            .sum()
    }

    fn valid_random_theta(l: LatticeSpec, seed: u64) -> ThetaField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_symmetric(l.p1, l.p2, 0.1, &mut rng);
        let t = ThetaField::new(l, raw.clone(), 1.0, false).unwrap();
        let lmax = t.eigenvalues().unwrap().max();
        let s = if lmax > 0.8 { 0.8 / lmax } else { 1.0 };
        ThetaField::new(l, raw * s, 1.0, false).unwrap()
    }

    #[test]
    fn loglik_matches_dense_density() {
        for (p1, p2, seed) in [(4, 4, 1), (5, 6, 2), (6, 6, 3)] {
            let l = LatticeSpec::torus(p1, p2).unwrap();
            let theta = valid_random_theta(l, seed);
            let x = sample_torus_gmrf(&theta, 3, seed).unwrap();
            let got = torus_loglik(&theta, 1.7, &x).unwrap();
            let want = dense_loglik(&theta, 1.7, &x);
            assert!((got - want).abs() <= 1e-8 * want.abs(), "{got} vs {want}");
        }
    }

    #[test]
    fn loglik_of_white_noise() {
        let l = LatticeSpec::torus(5, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = Array3::from_shape_fn((2, 5, 4), |_| rng.random_range(-2.0..2.0));
        let x = FieldObservations::new(l, data.clone()).unwrap();
        let got = torus_loglik(&ThetaField::zeros(l, 1.0), 1.0, &x).unwrap();
        let want: f64 = data.iter().map(|v| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * v * v).sum();
        assert!((got - want).abs() < 1e-10 * want.abs());
    }

    #[test]
    fn loglik_rejects_invalid_theta_and_plane_data() {
        let l = LatticeSpec::torus(6, 6).unwrap();
        let x = sample_torus_gmrf(&ThetaField::zeros(l, 1.0), 1, 0).unwrap();
        let ok = make_theta_phi(0.015, &l).unwrap();
        let bad = ThetaField::new(l, ok.coeffs * 10.0, 1.0, true).unwrap();
        assert!(matches!(torus_loglik(&bad, 1.0, &x), Err(Error::InvalidTheta { .. })));
        let p = LatticeSpec::plane(6, 6).unwrap();
        let y = FieldObservations::new(p, x.data.clone()).unwrap();
        let m = build_model_collection(&l, 2, true).unwrap();
        assert!(matches!(fit_mle(m.largest(), &y, true), Err(Error::TorusRequired(_))));
    }

    #[test]
    fn mle_of_empty_model_is_second_moment() {
        let l = LatticeSpec::torus(8, 8).unwrap();
        let x = sample_torus_gmrf(&make_theta_phi(0.01, &l).unwrap(), 2, 5).unwrap();
        let col = build_model_collection(&l, 3, true).unwrap();
        let r = fit_mle(&col.models()[0], &x, true).unwrap();
        let m2 = x.data.iter().map(|v| v * v).sum::<f64>() / x.data.len() as f64;
        assert!((r.sigma2_hat - m2).abs() < 1e-12 * m2);
        assert!(r.beta.is_empty() && r.converged);
    }

    #[test]
    fn profile_sigma_is_optimal() {
        let l = LatticeSpec::torus(8, 8).unwrap();
        let x = sample_torus_gmrf(&make_theta_phi(0.01, &l).unwrap(), 1, 3).unwrap();
        let col = build_model_collection(&l, 3, true).unwrap();
        let r = fit_mle(col.largest(), &x, true).unwrap();
        let direct = torus_loglik(&r.theta, r.sigma2_hat, &x).unwrap();
        assert!((direct - r.loglik).abs() < 1e-9 * direct.abs());
        for f in [0.5, 0.9, 0.99, 1.01, 1.1, 2.0] {
            assert!(torus_loglik(&r.theta, r.sigma2_hat * f, &x).unwrap() < r.loglik);
        }
    }

    #[test]
    fn mle_beats_random_feasible_points() {
        let l = LatticeSpec::torus(10, 10).unwrap();
        let x = sample_torus_gmrf(&make_theta_phi(0.015, &l).unwrap(), 1, 11).unwrap();
        let col = build_model_collection(&l, 3, true).unwrap();
        let m = col.largest();
        let r = fit_mle(m, &x, true).unwrap();
        assert!(r.converged);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tried = 0;
        while tried < 1000 {
            let beta: Vec<f64> = (0..m.dim(true)).map(|_| rng.random_range(-0.3..0.3)).collect();
            let theta = ThetaField::from_class_values(l, m, true, &beta, 1.0);
            if theta.eigenvalues().unwrap().max() >= 1.0 - MLE_MARGIN {
                continue;
            }
            tried += 1;
            let s2 = rng.random_range(0.2..5.0);
            assert!(torus_loglik(&theta, s2, &x).unwrap() <= r.loglik + 1e-9 * r.loglik.abs());
        }
    }

    #[test]
    fn mle_more_efficient_than_cls_with_many_replications() {
        let l = LatticeSpec::torus(20, 20).unwrap();
        let truth = make_theta_phi(0.015, &l).unwrap();
        let col = build_model_collection(&l, 10, true).unwrap();
        let m = col.models().iter().find(|m| m.radius_sq == 17).unwrap();
        let mut wins = 0;
        for seed in 0..20 {
            let many = sample_torus_gmrf(&truth, 50, seed).unwrap();
            let one = FieldObservations::new(l, many.data.slice(ndarray::s![0..1, .., ..]).to_owned()).unwrap();
            let mle = fit_mle(m, &many, true).unwrap();
            let cls = fit_torus(m, &one, true, &ConstraintSpec::default()).unwrap();
            let err = |t: &ThetaField| (&t.coeffs - &truth.coeffs).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if err(&mle.theta) < err(&cls.theta) {
                wins += 1;
            }
        }
        assert!(wins > 10, "{wins}");
    }

    #[test]
    fn aic_selects_at_least_bic_dimension() {
        let l = LatticeSpec::torus(12, 12).unwrap();
        let col = build_model_collection(&l, 8, true).unwrap();
        for seed in 0..6 {
            let x = sample_torus_gmrf(&make_theta_phi(0.015, &l).unwrap(), 1, seed).unwrap();
            let fits = fit_mle_collection(&x, &col, true).unwrap();
            let a = select_by_criterion(&fits, InfoCriterion::Aic, &l).unwrap();
            let b = select_by_criterion(&fits, InfoCriterion::Bic, &l).unwrap();
            assert!(fits[a].model.dim(true) >= fits[b].model.dim(true));
            let (k, r) = aic_bic_select(&x, &col, true, InfoCriterion::Bic).unwrap();
            assert_eq!(k, b);
            assert_eq!(r.beta, fits[b].beta);
        }
        // nested fits: the likelihood never decreases with the model
        let x = sample_torus_gmrf(&make_theta_phi(0.015, &l).unwrap(), 1, 99).unwrap();
        let fits = fit_mle_collection(&x, &col, true).unwrap();
        for w in fits.windows(2) {
            assert!(w[1].loglik >= w[0].loglik - 1e-8 * w[0].loglik.abs());
        }
    }

    fn brute_counts(p: usize, max_lag: f64, n_bins: usize) -> Vec<usize> {
        let width = max_lag / n_bins as f64;
        let mut counts = vec![0; n_bins];
        let nodes: Vec<(i64, i64)> = (0..p as i64).flat_map(|i| (0..p as i64).map(move |j| (i, j))).collect();
        for a in 0..nodes.len() {
            for b in a + 1..nodes.len() {
                let d = (((nodes[a].0 - nodes[b].0).pow(2) + (nodes[a].1 - nodes[b].1).pow(2)) as f64).sqrt();
                if d <= max_lag {
                    let k = (((d / width).ceil() as usize).max(1) - 1).min(n_bins - 1);
                    counts[k] += 1;
                }
            }
        }
        counts
    }

    #[test]
    fn pair_counts_match_enumeration() {
        let l = LatticeSpec::plane(8, 8).unwrap();
        let x = FieldObservations::new(l, Array3::from_shape_fn((1, 8, 8), |(_, i, j)| (i * 8 + j) as f64)).unwrap();
        for (lag, nb) in [(4.0, 4), (5.5, 7), (3.0, 3)] {
            let bins = empirical_variogram(&x, lag, nb).unwrap();
            let want = brute_counts(8, lag, nb);
            let got: Vec<usize> = bins.iter().map(|b| b.count).collect();
            assert_eq!(got, want.into_iter().filter(|&c| c > 0).collect::<Vec<_>>());
        }
    }

    #[test]
    fn constant_field_has_zero_variogram() {
        let l = LatticeSpec::plane(10, 10).unwrap();
        let x = FieldObservations::new(l, Array3::from_elem((1, 10, 10), 3.5)).unwrap();
        let bins = empirical_variogram(&x, 5.0, 5).unwrap();
        assert!(bins.iter().all(|b| b.semivariance == 0.0));
        assert!(fit_variogram_wls(&bins, CorrelationFamily::Exponential, None).is_err());
    }

    #[test]
    fn white_noise_sill_is_one() {
        let l = LatticeSpec::plane(30, 30).unwrap();
        let (lag, nb) = default_variogram_bins(&l);
        let reps = 200;
        let mut acc = vec![Vec::new(); nb];
        for r in 0..reps {
            let mut rng = crate::simulate::substream(77, r);
            let normal = rand_distr::StandardNormal;
            let data = Array3::from_shape_fn((1, 30, 30), |_| rng.sample::<f64, _>(normal));
            let x = FieldObservations::new(l, data).unwrap();
            for (k, b) in empirical_variogram(&x, lag, nb).unwrap().iter().enumerate() {
                acc[k].push(b.semivariance);
            }
        }
        for v in acc {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            let se = sd / (v.len() as f64).sqrt();
            assert!((m - 1.0).abs() < 3.0 * se + 2e-3, "{m} ± {se}");
        }
    }

    fn exact_bins(model: &CorrelationModel) -> Vec<VariogramBin> {
        (1..=10)
            .map(|h| VariogramBin {
                lag: h as f64,
                semivariance: model.variance * (1.0 - model.correlation(h as f64)),
                count: 100 + 10 * h,
            })
            .collect()
    }

    #[test]
    fn noiseless_bins_are_recovered() {
        for family in [CorrelationFamily::Exponential, CorrelationFamily::Spherical, CorrelationFamily::Circular] {
            let truth = CorrelationModel {
                variance: 1.0,
                ..CorrelationModel::with_family(family, if family == CorrelationFamily::Exponential { 3.0 } else { 6.5 })
            };
            let fit = fit_variogram_wls(&exact_bins(&truth), family, None).unwrap();
            assert!((fit.range_hat - truth.range).abs() < 1e-4, "{family:?}: {}", fit.range_hat);
            assert!((fit.variance_hat - 1.0).abs() < 1e-4);
            assert!(fit.converged);
        }
        let truth = CorrelationModel {
            variance: 2.0,
            ..CorrelationModel::matern(2.0, 1.5)
        };
        let fit = fit_variogram_wls(&exact_bins(&truth), CorrelationFamily::Matern, None).unwrap();
        assert!((fit.range_hat - 2.0).abs() < 1e-3, "{}", fit.range_hat);
        assert!((fit.kappa_hat.unwrap() - 1.5).abs() < 1e-3);
        assert!((fit.variance_hat - 2.0).abs() < 1e-3);
    }

    #[test]
    fn matern_half_matches_exponential_fit() {
        let l = LatticeSpec::plane(20, 20).unwrap();
        let x = sample_plane_window(&CorrelationModel::exponential(3.0), &l, 1, None, 1).unwrap();
        let (lag, nb) = default_variogram_bins(&l);
        let bins = empirical_variogram(&x, lag, nb).unwrap();
        let e = fit_variogram_wls(&bins, CorrelationFamily::Exponential, None).unwrap();
        let m = fit_variogram_wls(&bins, CorrelationFamily::Matern, Some(0.5)).unwrap();
        assert!((e.range_hat - m.range_hat).abs() < 1e-5 * e.range_hat);
        assert!((e.variance_hat - m.variance_hat).abs() < 1e-5 * e.variance_hat);
        assert_eq!(m.kappa_hat, Some(0.5));
    }

    #[test]
    fn reweighting_reaches_fixed_point() {
        let l = LatticeSpec::plane(20, 20).unwrap();
        let x = sample_plane_window(&CorrelationModel::exponential(3.0), &l, 1, None, 2).unwrap();
        let (lag, nb) = default_variogram_bins(&l);
        let fit = fit_variogram_wls(&empirical_variogram(&x, lag, nb).unwrap(), CorrelationFamily::Exponential, None).unwrap();
        assert!(fit.converged && fit.rounds <= WLS_ROUNDS);
        // one more round with weights from the final parameters stays put
        let refit = fit_variogram_wls(&fit.bins, CorrelationFamily::Exponential, None).unwrap();
        assert!((refit.range_hat - fit.range_hat).abs() < 1e-5 * fit.range_hat);
    }

    #[test]
    fn nugget_kriging_weights_are_uniform() {
        let model = CorrelationModel::exponential(1e-3);
        let (w, _) = kriging_weights(&model, 5, None).unwrap();
        for (_, v) in w {
            assert!((v - 1.0 / 24.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kriging_matches_dense_solve() {
        let model = CorrelationModel::exponential(3.0);
        let (w, _) = kriging_weights(&model, 5, None).unwrap();
        // independent assembly: full 25-node covariance, then partition
        let l = LatticeSpec::plane(5, 5).unwrap();
        let sigma = crate::simulate::window_covariance(&model, &l, None);
        let center = 12;
        let others: Vec<usize> = (0..25).filter(|&i| i != center).collect();
        let c = DMatrix::from_fn(24, 24, |r, s| sigma[(others[r], others[s])]);
        let c0 = DVector::from_fn(24, |r, _| sigma[(others[r], center)]);
        let ci = c.clone().try_inverse().unwrap();
        let one = DVector::from_element(24, 1.0);
        let mu = (1.0 - one.dot(&(&ci * &c0))) / one.dot(&(&ci * &one));
        let want = &ci * (&c0 + &one * mu);
        for (r, &node) in others.iter().enumerate() {
            let off = ((node / 5) as i64 - 2, (node % 5) as i64 - 2);
            let got = w.iter().find(|(o, _)| *o == off).unwrap().1;
            assert!((got - want[r]).abs() < 1e-10, "{off:?}");
        }
    }

    #[test]
    fn kriging_theta_is_symmetric_and_padded() {
        let l = LatticeSpec::plane(20, 20).unwrap();
        let t = kriging_theta_for_model(&CorrelationModel::exponential(3.0), &l, 11, None).unwrap();
        assert_eq!(t.coeffs[[0, 0]], 0.0);
        assert_eq!(t.nonzero().len(), 120);
        assert!((t.coeffs.sum() - 1.0).abs() < 1e-10);
        assert!(t.sigma2 > 0.0);
        assert!(kriging_theta_for_model(&CorrelationModel::exponential(3.0), &l, 21, None).is_err());
        assert!(kriging_weights(&CorrelationModel::exponential(3.0), 4, None).is_err());
    }

    #[test]
    fn smooth_matern_reports_singular_window() {
        let model = CorrelationModel::matern(8.0, 4.0);
        assert!(matches!(kriging_weights(&model, 11, None), Err(Error::SingularKriging { window: 11 })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn kriging_weights_sum_to_one(range in 0.5f64..8.0, fam in 0usize..3, k in prop::sample::select(vec![3usize, 5, 7]), ratio in 1.0f64..5.0) {
            let family = [CorrelationFamily::Exponential, CorrelationFamily::Spherical, CorrelationFamily::Circular][fam];
            let model = CorrelationModel::with_family(family, range);
            let aniso = AnisotropySpec::new(ratio, 0.3).unwrap();
            let (w, _) = kriging_weights(&model, k, Some(&aniso)).unwrap();
            let s: f64 = w.iter().map(|x| x.1).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn kriging_weights_ignore_variance(range in 0.5f64..8.0, e in -4i32..5) {
            let a = CorrelationModel::exponential(range);
            let b = CorrelationModel { variance: 2f64.powi(e), ..a.clone() };
            let (wa, _) = kriging_weights(&a, 5, None).unwrap();
            let (wb, _) = kriging_weights(&b, 5, None).unwrap();
            for (x, y) in wa.iter().zip(&wb) {
                prop_assert_eq!(x.1, y.1);
            }
        }
    }
}
