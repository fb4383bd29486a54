//! Primal active-set solver for small convex quadratic programs
//! `min ½ xᵀHx + gᵀx  s.t.  Ax <= c`, started from a feasible point.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) const QP_TOL: f64 = 1e-8;
pub(crate) const QP_MAX_ITER: usize = 500;

#[derive(Debug, Clone)]
pub(crate) struct QpSolution {
    pub x: DVector<f64>,
    /// Indices of constraints in the final working set.
    #[allow(dead_code)]
    pub active: Vec<usize>,
    #[allow(dead_code)]
    pub multipliers: Vec<f64>,
    pub kkt_residual: f64,
    #[allow(dead_code)]
    pub iterations: usize,
}

/// Solves `[H Aᵀ; A 0] [p; μ] = rhs`, falling back to the minimum-norm
/// least-squares solution when the system is singular.
fn solve_kkt(h: &DMatrix<f64>, aw: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let d = h.nrows();
    let k = aw.nrows();
    let mut kkt = DMatrix::zeros(d + k, d + k);
    kkt.view_mut((0, 0), (d, d)).copy_from(h);
    kkt.view_mut((d, 0), (k, d)).copy_from(aw);
    kkt.view_mut((0, d), (d, k)).copy_from(&aw.transpose());
    let scale = h.amax().max(aw.amax()).max(1e-300);
    if let Some(sol) = kkt.clone().lu().solve(rhs) {
        if sol.iter().all(|v| v.is_finite()) && (&kkt * &sol - rhs).amax() <= 1e-9 * scale * (1.0 + sol.amax()) {
            return sol;
        }
    }
    kkt.svd(true, true)
        .solve(rhs, 1e-12 * scale)
        .expect("SVD factors were computed")
}

fn rows(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), a.ncols(), |r, c| a[(idx[r], c)])
}

/// Active-set iterations from the feasible point `x0`.
pub(crate) fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    x0: DVector<f64>,
) -> Result<QpSolution> {
    let d = h.nrows();
    let m = a.nrows();
    let mut x = x0;
    let mut work: Vec<usize> = Vec::new();
    let gscale = g.amax().max(h.amax()).max(1.0);
    for iter in 0..QP_MAX_ITER {
        let grad = h * &x + g;
        let aw = rows(a, &work);
        let mut rhs = DVector::zeros(d + work.len());
        rhs.rows_mut(0, d).copy_from(&(-&grad));
        let sol = solve_kkt(h, &aw, &rhs);
        let p = sol.rows(0, d).into_owned();
        if p.amax() <= QP_TOL * x.amax().max(1.0) {
            let mu: Vec<f64> = sol.rows(d, work.len()).iter().copied().collect();
            let (imin, mumin) = mu
                .iter()
                .copied()
                .enumerate()
                .fold((usize::MAX, 0.0), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
            if mumin >= -QP_TOL * gscale {
                let kkt_residual = kkt_residual(&grad, a, c, &x, &work, &mu, gscale);
                return Ok(QpSolution {
                    x,
                    active: work,
                    multipliers: mu,
                    kkt_residual,
                    iterations: iter,
                });
            }
            work.remove(imin);
            continue;
        }
        // longest feasible step along p
        let ap = a * &p;
        let ax = a * &x;
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if ap[i] > 1e-14 * a.row(i).amax() * p.amax() && !work.contains(&i) {
                let t = ((c[i] - ax[i]) / ap[i]).max(0.0);
                if t < alpha {
                    alpha = t;
                    blocking = Some(i);
                }
            }
        }
        x += alpha * &p;
        if let Some(i) = blocking {
            work.push(i);
        }
    }
    Err(Error::NoConvergence("active-set QP", QP_MAX_ITER))
}

fn kkt_residual(
    grad: &DVector<f64>,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    x: &DVector<f64>,
    work: &[usize],
    mu: &[f64],
    scale: f64,
) -> f64 {
    let mut stat = grad.clone();
    for (k, &i) in work.iter().enumerate() {
        stat += mu[k] * a.row(i).transpose();
    }
    let infeas = (a * x - c).iter().fold(0.0f64, |acc, &v| acc.max(v));
    let dual = mu.iter().fold(0.0f64, |acc, &v| acc.max(-v));
    (stat.amax() / scale).max(infeas).max(dual / scale)
}
