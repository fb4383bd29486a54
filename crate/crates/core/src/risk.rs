//! Prediction loss between conditional-regression parameters, Monte Carlo
//! risk estimates with normal confidence intervals, oracle risk and ratios.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{LatticeSpec, Offset};
use crate::params::ThetaField;
use crate::simulate::{window_covariance, AnisotropySpec, CorrelationModel};

/// Largest window side used for the exact plane predictor.
pub const PLANE_LOSS_MAX_SIDE: usize = 31;

fn same_shape(a: &LatticeSpec, b: &LatticeSpec) -> Result<()> {
    if (a.p1, a.p2) != (b.p1, b.p2) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", b.p1, b.p2),
            got: format!("{}x{}", a.p1, a.p2),
        });
    }
    Ok(())
}

/// `(1/(p1 p2)) tr[(C(θ1) - C(θ2)) Σ (C(θ1) - C(θ2))]` with `Σ` the
/// covariance of `truth`, computed in the Fourier domain.
pub fn loss_torus(theta1: &ThetaField, theta2: &ThetaField, truth: &ThetaField) -> Result<f64> {
    same_shape(&theta1.lattice, &truth.lattice)?;
    same_shape(&theta2.lattice, &truth.lattice)?;
    let lt = truth.eigenvalues()?;
    if lt.max() >= 1.0 {
        return Err(Error::InvalidTheta { min_gap: 1.0 - lt.max() });
    }
    let diff = &theta1.coeffs - &theta2.coeffs;
    let ld = crate::spectral::dft2_eigenvalues(&diff)?;
    let s: f64 = ld
        .values
        .iter()
        .zip(&lt.values)
        .map(|(d, l)| d * d / (1.0 - l))
        .sum();
    Ok(truth.sigma2 * s / truth.lattice.size() as f64)
}

/// Exact prediction loss for estimates of the conditional expectation of the
/// center of a plane window under a stationary correlation model.
///
/// The best predictor `a* = Σ_RR⁻¹ c0` is computed once; each loss is then
/// `‖Lᵀ(θ̂ - a*)‖²` with `Σ_RR = L Lᵀ`, which is nonnegative by
/// construction.
#[derive(Debug, Clone)]
pub struct PlaneLossEvaluator {
    /// Window on which the predictor is computed (possibly truncated).
    pub window: LatticeSpec,
    pub center: (usize, usize),
    pub truncated: bool,
    chol: Cholesky<f64, Dyn>,
    a_star: DVector<f64>,
    /// Node index in the window -> position in the `R` vector.
    slot: Vec<Option<usize>>,
    /// Conditional variance of the center given the rest of the window.
    pub conditional_variance: f64,
}

impl PlaneLossEvaluator {
    pub fn new(model: &CorrelationModel, lattice: &LatticeSpec, aniso: Option<&AnisotropySpec>) -> Result<Self> {
        model.validate()?;
        let side = |p: usize| p.min(PLANE_LOSS_MAX_SIDE);
        let window = LatticeSpec::plane(side(lattice.p1), side(lattice.p2))?;
        let truncated = window.size() < lattice.size();
        if truncated {
            log::info!(
                "plane loss uses a centered {}x{} sub-window of the {}x{} lattice",
                window.p1,
                window.p2,
                lattice.p1,
                lattice.p2
            );
        }
        let center = (window.p1 / 2, window.p2 / 2);
        let sigma = window_covariance(model, &window, aniso);
        let c = window.index(center.0, center.1);
        let nn = window.size();
        let mut slot = vec![None; nn];
        let mut k = 0;
        for (idx, s) in slot.iter_mut().enumerate() {
            if idx != c {
                *s = Some(k);
                k += 1;
            }
        }
        let rest: Vec<usize> = (0..nn).filter(|&i| i != c).collect();
        let srr = DMatrix::from_fn(nn - 1, nn - 1, |r, s| sigma[(rest[r], rest[s])]);
        let c0 = DVector::from_fn(nn - 1, |r, _| sigma[(rest[r], c)]);
        let chol = srr
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("window covariance of the predictor".into()))?;
        let a_star = chol.solve(&c0);
        let conditional_variance = sigma[(c, c)] - a_star.dot(&c0);
        Ok(Self {
            window,
            center,
            truncated,
            chol,
            a_star,
            slot,
            conditional_variance,
        })
    }

    /// Coefficients of `E[X_center | rest]` keyed by offset from the center.
    pub fn best_predictor(&self) -> Vec<(Offset, f64)> {
        let mut out = Vec::with_capacity(self.a_star.len());
        for (idx, s) in self.slot.iter().enumerate() {
            if let Some(k) = s {
                let (i, j) = (idx / self.window.p2, idx % self.window.p2);
                out.push(((i as i32 - self.center.0 as i32, j as i32 - self.center.1 as i32), self.a_star[*k]));
            }
        }
        out
    }

    /// Loss of a predictor given as `(offset, coefficient)` pairs.
    pub fn loss_coeffs(&self, coeffs: &[(Offset, f64)]) -> Result<f64> {
        let mut diff = -self.a_star.clone();
        for &((di, dj), v) in coeffs {
            if v == 0.0 {
                continue;
            }
            let i = self.center.0 as i64 + di as i64;
            let j = self.center.1 as i64 + dj as i64;
            if (di, dj) == (0, 0) || i < 0 || j < 0 || i >= self.window.p1 as i64 || j >= self.window.p2 as i64 {
                return Err(Error::InvalidParameter(format!(
                    "offset ({di}, {dj}) is outside the {}x{} loss window",
                    self.window.p1, self.window.p2
                )));
            }
            let k = self.slot[self.window.index(i as usize, j as usize)].expect("not the center");
            diff[k] += v;
        }
        let l = self.chol.l();
        Ok((l.transpose() * diff).norm_squared())
    }

    pub fn loss(&self, theta: &ThetaField) -> Result<f64> {
        self.loss_coeffs(&theta.nonzero())
    }
}

/// Loss of `theta_hat` for a plane truth; builds a fresh evaluator.
pub fn loss_plane(
    theta_hat: &ThetaField,
    truth: &CorrelationModel,
    window: &LatticeSpec,
    aniso: Option<&AnisotropySpec>,
) -> Result<f64> {
    PlaneLossEvaluator::new(truth, window, aniso)?.loss(theta_hat)
}

/// Monte Carlo mean loss with a 95% normal confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub ci95_halfwidth: f64,
    /// Successful replications.
    pub reps: usize,
    pub failures: usize,
    pub per_rep_losses: Vec<f64>,
}

impl RiskEstimate {
    /// Losses in replication order; the total is accumulated in sorted order
    /// so that the result does not depend on scheduling.
    pub fn from_losses(losses: Vec<f64>, failures: usize) -> Self {
        let reps = losses.len();
        let mut sorted = losses.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = if reps > 0 { sorted.iter().sum::<f64>() / reps as f64 } else { f64::NAN };
        let ci95_halfwidth = if reps > 1 {
            let mut dev: Vec<f64> = sorted.iter().map(|l| (l - mean).powi(2)).collect();
            dev.sort_by(f64::total_cmp);
            let sd = (dev.iter().sum::<f64>() / (reps - 1) as f64).sqrt();
            1.96 * sd / (reps as f64).sqrt()
        } else {
            f64::NAN
        };
        Self {
            mean,
            ci95_halfwidth,
            reps,
            failures,
            per_rep_losses: losses,
        }
    }
}

/// Runs `reps` independent replications, each producing one loss per
/// output cell (`None` marks an estimator failure), and aggregates per
/// cell. Replication `r` must derive all its randomness from `r`.
pub fn monte_carlo_cells<F>(reps: usize, cells: usize, replicate: F) -> Result<Vec<RiskEstimate>>
where
    F: Fn(usize) -> Vec<Option<f64>> + Sync,
{
    if reps < 2 {
        return Err(Error::InvalidParameter(format!("at least 2 replications are required, got {reps}")));
    }
    let rows: Vec<Vec<Option<f64>>> = (0..reps).into_par_iter().map(&replicate).collect();
    let mut out = Vec::with_capacity(cells);
    for c in 0..cells {
        let mut losses = Vec::with_capacity(reps);
        let mut failures = 0;
        for row in &rows {
            match row.get(c).copied().flatten() {
                Some(l) if l.is_finite() => losses.push(l),
                _ => failures += 1,
            }
        }
        out.push(RiskEstimate::from_losses(losses, failures));
    }
    Ok(out)
}

/// Single-cell Monte Carlo risk; estimator errors are logged and counted.
pub fn monte_carlo_risk<F>(reps: usize, replicate: F) -> Result<RiskEstimate>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let cells = monte_carlo_cells(reps, 1, |r| {
        vec![match replicate(r) {
            Ok(l) => Some(l),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                None
            }
        }]
    })?;
    Ok(cells.into_iter().next().expect("one cell"))
}

/// Oracle model index (smallest mean risk, first on ties) and the ratio of
/// the selected risk to it; `+∞` when the oracle risk is zero.
pub fn oracle_and_ratio(per_model: &[RiskEstimate], selected: &RiskEstimate) -> Result<(usize, f64)> {
    if per_model.is_empty() {
        return Err(Error::EmptyFitList);
    }
    let mut best = 0;
    for (k, r) in per_model.iter().enumerate() {
        if r.mean < per_model[best].mean {
            best = k;
        }
    }
    let oracle = per_model[best].mean;
    let ratio = if oracle == 0.0 {
        f64::INFINITY
    } else {
        selected.mean / oracle
    };
    Ok((best, ratio))
}

/// One cell of a benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskRow {
    pub experiment: String,
    pub estimator: String,
    pub param: String,
    pub risk_mean: f64,
    pub ci95: f64,
    pub reps: usize,
    pub failures: usize,
}

impl RiskRow {
    pub fn new(experiment: &str, estimator: &str, param: &str, risk: &RiskEstimate) -> Self {
        Self {
            experiment: experiment.into(),
            estimator: estimator.into(),
            param: param.into(),
            risk_mean: risk.mean,
            ci95: risk.ci95_halfwidth,
            reps: risk.reps,
            failures: risk.failures,
        }
    }
}

/// `x` with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x == 0.0 { "0".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..15).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{:.*e}", digits - 1, x)
    }
}

/// Writes rows as CSV with columns
/// `experiment,estimator,param,risk_mean,ci95,reps,failures`.
pub fn write_risk_csv<W: Write>(rows: &[RiskRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["experiment", "estimator", "param", "risk_mean", "ci95", "reps", "failures"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.experiment.clone(),
            r.estimator.clone(),
            r.param.clone(),
            format_sig(r.risk_mean, 6),
            format_sig(r.ci95, 6),
            r.reps.to_string(),
            r.failures.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::build_circulant;
    use crate::simulate::{make_theta_phi, substream, PlaneSampler};
    use crate::testutil::random_symmetric;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_theta(l: LatticeSpec, seed: u64, scale: f64) -> ThetaField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ThetaField::new(l, random_symmetric(l.p1, l.p2, scale, &mut rng), 1.0, false).unwrap()
    }

    fn valid_truth(l: LatticeSpec, seed: u64, sigma2: f64) -> ThetaField {
        let t = random_theta(l, seed, 0.1);
        let lmax = t.eigenvalues().unwrap().max();
        let s = if lmax > 0.8 { 0.8 / lmax } else { 1.0 };
        ThetaField::new(l, t.coeffs * s, sigma2, false).unwrap()
    }

    #[test]
    fn torus_loss_matches_dense_trace() {
        for (p1, p2, seed) in [(4, 4, 1u64), (4, 6, 2), (5, 5, 3)] {
            let l = LatticeSpec::torus(p1, p2).unwrap();
            let truth = valid_truth(l, seed, 1.3);
            let (t1, t2) = (random_theta(l, seed + 10, 0.3), random_theta(l, seed + 20, 0.3));
            let nn = l.size();
            let c1 = build_circulant(&t1).unwrap();
            let c2 = build_circulant(&t2).unwrap();
            let sigma = (DMatrix::identity(nn, nn) - build_circulant(&truth).unwrap()).try_inverse().unwrap() * 1.3;
            let d = c1 - c2;
            let want = (&d * sigma * &d).trace() / nn as f64;
            let got = loss_torus(&t1, &t2, &truth).unwrap();
            assert!((got - want).abs() <= 1e-10 * want, "{got} vs {want}");
            let swapped = loss_torus(&t2, &t1, &truth).unwrap();
            assert!((swapped - got).abs() <= 1e-14 * got);
        }
    }

    #[test]
    fn torus_loss_scales_with_sigma2() {
        let l = LatticeSpec::torus(6, 6).unwrap();
        let truth = valid_truth(l, 5, 1.0);
        let double = ThetaField {
            sigma2: 2.0,
            ..truth.clone()
        };
        let t = random_theta(l, 6, 0.2);
        assert_eq!(loss_torus(&t, &truth, &double).unwrap(), 2.0 * loss_torus(&t, &truth, &truth).unwrap());
        assert_eq!(loss_torus(&truth, &truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn torus_loss_rejects_invalid_truth() {
        let l = LatticeSpec::torus(6, 6).unwrap();
        let base = make_theta_phi(0.015, &l).unwrap();
        let bad = ThetaField::new(l, base.coeffs.clone() * 10.0, 1.0, true).unwrap();
        assert!(matches!(loss_torus(&base, &base, &bad), Err(Error::InvalidTheta { .. })));
    }

    #[test]
    fn plane_best_predictor_has_zero_loss() {
        let l = LatticeSpec::plane(9, 9).unwrap();
        let ev = PlaneLossEvaluator::new(&CorrelationModel::exponential(3.0), &l, None).unwrap();
        let best = ev.best_predictor();
        assert!(ev.loss_coeffs(&best).unwrap() < 1e-20);
        assert!(ev.loss(&ThetaField::zeros(l, 1.0)).unwrap() > 0.0);
        assert!(ev.conditional_variance > 0.0);
    }

    #[test]
    fn white_noise_truth_zero_predictor() {
        let l = LatticeSpec::plane(9, 9).unwrap();
        let ev = PlaneLossEvaluator::new(&CorrelationModel::exponential(1e-3), &l, None).unwrap();
        assert_eq!(ev.loss(&ThetaField::zeros(l, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn plane_loss_rejects_offsets_outside_window() {
        let l = LatticeSpec::plane(9, 9).unwrap();
        let ev = PlaneLossEvaluator::new(&CorrelationModel::exponential(3.0), &l, None).unwrap();
        assert!(ev.loss_coeffs(&[((5, 0), 0.1)]).is_err());
        assert!(ev.loss_coeffs(&[((0, 0), 0.1)]).is_err());
    }

    #[test]
    fn large_windows_are_truncated() {
        let l = LatticeSpec::plane(40, 40).unwrap();
        let ev = PlaneLossEvaluator::new(&CorrelationModel::exponential(3.0), &l, None).unwrap();
        assert!(ev.truncated);
        assert_eq!((ev.window.p1, ev.window.p2), (31, 31));
    }

    /// Monte Carlo oracle: `E[(θ̂·X - X_0)²] = loss + Var(X_0 | rest)`, with
    /// the conditional variance from an independent dense inverse.
    #[test]
    fn plane_loss_matches_monte_carlo() {
        let l = LatticeSpec::plane(9, 9).unwrap();
        let model = CorrelationModel::exponential(3.0);
        let ev = PlaneLossEvaluator::new(&model, &l, None).unwrap();
        let coeffs: Vec<(Offset, f64)> = vec![((1, 0), 0.2), ((-1, 0), 0.2), ((0, 1), 0.25), ((0, -1), 0.25), ((1, 1), 0.05)];
        let loss = ev.loss_coeffs(&coeffs).unwrap();
        let sigma = window_covariance(&model, &l, None);
        let prec = sigma.try_inverse().unwrap();
        let c = l.index(4, 4);
        let cond_var = 1.0 / prec[(c, c)];
        let sampler = PlaneSampler::new(&model, &l, None).unwrap();
        let draws = 100_000;
        let x = sampler.sample(draws, 3).unwrap();
        let mut sq = Vec::with_capacity(draws);
        for k in 0..draws {
            let f = x.replication(k);
            let pred: f64 = coeffs.iter().map(|&((i, j), v)| v * f[[(4 + i) as usize, (4 + j) as usize]]).sum();
            sq.push((pred - f[[4, 4]]).powi(2));
        }
        let m = sq.iter().sum::<f64>() / draws as f64;
        let sd = (sq.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
        let se = sd / (draws as f64).sqrt();
        assert!((m - (loss + cond_var)).abs() < 3.0 * se, "{m} vs {} ± {se}", loss + cond_var);
    }

    #[test]
    fn risk_estimate_statistics() {
        let r = RiskEstimate::from_losses(vec![1.0, 2.0, 3.0, 4.0], 1);
        assert_eq!(r.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((r.ci95_halfwidth - 1.96 * sd / 2.0).abs() < 1e-15);
        assert_eq!((r.reps, r.failures), (4, 1));
    }

    #[test]
    fn monte_carlo_with_exact_estimator() {
        let l = LatticeSpec::torus(10, 10).unwrap();
        let truth = make_theta_phi(0.015, &l).unwrap();
        let r = monte_carlo_risk(20, |_| loss_torus(&truth, &truth, &truth)).unwrap();
        assert_eq!((r.mean, r.ci95_halfwidth, r.reps), (0.0, 0.0, 20));
        assert!(monte_carlo_risk(1, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn monte_carlo_counts_failures_and_is_deterministic() {
        let run = || {
            monte_carlo_risk(50, |r| {
                use rand::Rng;
                if r % 10 == 3 {
                    return Err(Error::SingularKriging { window: 11 });
                }
                Ok(substream(9, r as u64).random::<f64>())
            })
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!((a.reps, a.failures), (45, 5));
    }

    #[test]
    fn ci_shrinks_like_root_reps() {
        let est = |reps: usize| {
            monte_carlo_risk(reps, |r| {
                use rand::Rng;
                Ok(substream(1, r as u64).random::<f64>())
            })
            .unwrap()
        };
        let ratio = est(200).ci95_halfwidth / est(1000).ci95_halfwidth;
        assert!((ratio - 5f64.sqrt()).abs() < 0.25, "{ratio}");
    }

    #[test]
    fn oracle_ratio_cases() {
        let r = |m: f64| RiskEstimate::from_losses(vec![m, m], 0);
        let per = [r(3.0), r(1.0), r(2.0)];
        assert_eq!(oracle_and_ratio(&per, &r(1.0)).unwrap(), (1, 1.0));
        assert_eq!(oracle_and_ratio(&per, &r(2.0)).unwrap(), (1, 2.0));
        let (k, ratio) = oracle_and_ratio(&[r(0.0), r(1.0)], &r(0.5)).unwrap();
        assert_eq!(k, 0);
        assert!(ratio.is_infinite());
        assert!(oracle_and_ratio(&[], &r(1.0)).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![RiskRow::new("table1", "cls-slope", "rho=inf", &RiskEstimate::from_losses(vec![0.0412345678, 0.05], 2))];
        let mut buf = Vec::new();
        write_risk_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "experiment,estimator,param,risk_mean,ci95,reps,failures");
        assert_eq!(lines.next().unwrap(), "table1,cls-slope,rho=inf,0.0456173,0.00859012,2,2");
        assert_eq!(format_sig(123456789.0, 6), "123456789");
        assert_eq!(format_sig(1.5e-7, 6), "1.50000e-7");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn torus_loss_nonnegative_zero_iff_equal(seed in any::<u64>(), p in 3usize..7) {
            let l = LatticeSpec::torus(p, p + 1).unwrap();
            let truth = valid_truth(l, seed, 1.0);
            let t1 = random_theta(l, seed ^ 7, 0.3);
            let t2 = random_theta(l, seed ^ 11, 0.3);
            let loss = loss_torus(&t1, &t2, &truth).unwrap();
            prop_assert!(loss > 0.0);
            prop_assert_eq!(loss_torus(&t1, &t1, &truth).unwrap(), 0.0);
        }

        #[test]
        fn plane_loss_nonnegative(seed in any::<u64>(), range in 0.5f64..6.0) {
            use rand::Rng;
            let l = LatticeSpec::plane(9, 9).unwrap();
            let ev = PlaneLossEvaluator::new(&CorrelationModel::exponential(range), &l, None).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<(Offset, f64)> = (-3..=3).flat_map(|i| (-3..=3).map(move |j| (i, j))).filter(|&o| o != (0, 0)).map(|o| (o, rng.random_range(-0.2..0.2))).collect();
            prop_assert!(ev.loss_coeffs(&coeffs).unwrap() > 0.0);
        }
    }
}
