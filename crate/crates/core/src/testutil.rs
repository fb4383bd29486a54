//! Brute-force helpers shared by unit tests.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;

/// Random centrally symmetric grid with zero at the origin.
pub fn random_symmetric<R: Rng>(p1: usize, p2: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    let mut th = Array2::zeros((p1, p2));
    for i in 0..p1 {
        for j in 0..p2 {
            let (mi, mj) = ((p1 - i) % p1, (p2 - j) % p2);
            if (i, j) == (0, 0) || (mi, mj) < (i, j) {
                continue;
            }
            let v = rng.random_range(-scale..scale);
            th[[i, j]] = v;
            th[[mi, mj]] = v;
        }
    }
    th
}

/// `λ[i,j] = Σ_{k,l} θ[k,l] cos(2π(ki/p1 + lj/p2))` by direct double sum.
pub fn naive_eigenvalues(th: &Array2<f64>) -> Array2<f64> {
    let (p1, p2) = th.dim();
    Array2::from_shape_fn((p1, p2), |(i, j)| {
        let mut s = 0.0;
        for k in 0..p1 {
            for l in 0..p2 {
                let arg = 2.0 * PI * ((k * i) as f64 / p1 as f64 + (l * j) as f64 / p2 as f64);
                s += th[[k, l]] * arg.cos();
            }
        }
        s
    })
}

/// Dense `C(θ)` assembled entry by entry from its definition.
pub fn dense_circulant(th: &Array2<f64>) -> DMatrix<f64> {
    let (p1, p2) = th.dim();
    let n = p1 * p2;
    DMatrix::from_fn(n, n, |r, c| {
        let (i1, j1) = (r / p2, r % p2);
        let (i2, j2) = (c / p2, c % p2);
        th[[(i2 + p1 - i1) % p1, (j2 + p2 - j1) % p2]]
    })
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}
