//! Eigenvalues of symmetric block-circulant matrices via the 2-D DFT, and
//! spectral-density evaluation for finite-support plane coefficients.
//!
//! Every symmetric block-circulant `C(θ)` is diagonalized by the same
//! orthogonal basis; its eigenvalue at frequency `(i, j)` is
//! `Σ_{k,l} θ[k,l] cos(2π(ki/p1 + lj/p2))`, which is the real part of the
//! unnormalized forward DFT of `θ`.

use std::cell::RefCell;
use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::lattice::Offset;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_along_rows(buf: &mut [Complex64], len: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let fft = if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        };
        fft.process(buf);
    });
}

fn transpose(src: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// In-place unnormalized 2-D DFT of a row-major complex grid.
pub fn fft2_in_place(grid: &mut Array2<Complex64>, inverse: bool) {
    let (rows, cols) = grid.dim();
    let mut buf: Vec<Complex64> = grid.iter().copied().collect();
    fft_along_rows(&mut buf, cols, inverse);
    let mut t = transpose(&buf, rows, cols);
    fft_along_rows(&mut t, rows, inverse);
    let back = transpose(&t, cols, rows);
    for (dst, src) in grid.iter_mut().zip(back) {
        *dst = src;
    }
}

/// Unnormalized forward 2-D DFT of a real grid.
pub fn fft2_real(input: &Array2<f64>) -> Array2<Complex64> {
    let mut grid = input.mapv(|v| Complex64::new(v, 0.0));
    fft2_in_place(&mut grid, false);
    grid
}

/// One real eigenvalue per Fourier frequency, `values[[i, j]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenGrid {
    pub values: Array2<f64>,
}

impl EigenGrid {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Checks `a[i, j] == a[-i, -j]` (indices modulo the grid) within `tol`.
pub(crate) fn check_central_symmetry(a: &Array2<f64>, tol: f64) -> Result<()> {
    let (p1, p2) = a.dim();
    for i in 0..p1 {
        for j in 0..p2 {
            let mi = (p1 - i) % p1;
            let mj = (p2 - j) % p2;
            let (v, w) = (a[[i, j]], a[[mi, mj]]);
            if (v - w).abs() > tol {
                return Err(Error::SymmetryViolation {
                    i,
                    j,
                    value: v,
                    mirror: w,
                });
            }
        }
    }
    Ok(())
}

/// Eigenvalues of the symmetric block-circulant matrix generated by a
/// centrally symmetric grid, computed by FFT.
pub fn dft2_eigenvalues(coeffs: &Array2<f64>) -> Result<EigenGrid> {
    let norm1: f64 = coeffs.iter().map(|v| v.abs()).sum();
    check_central_symmetry(coeffs, 1e-12 * norm1.max(1e-300))?;
    let spectrum = fft2_real(coeffs);
    let tol = 1e-10 * norm1;
    let imag = spectrum.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if imag > tol && norm1 > 0.0 {
        return Err(Error::ComplexEigenvalues { imag, tol });
    }
    Ok(EigenGrid {
        values: spectrum.mapv(|c| c.re),
    })
}

/// Summary of the spectrum of `I - C(θ)` on a torus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusValidity {
    pub valid: bool,
    /// `min (1 - λ)`, the smallest eigenvalue of the partial correlation matrix.
    pub min_gap: f64,
    /// `max (1 - λ)`.
    pub max_gap: f64,
}

/// `I - C(θ) ≻ 0`, and its largest eigenvalue below `rho` when given.
pub fn is_valid_torus(eigen: &EigenGrid, rho: Option<f64>) -> TorusValidity {
    let min_gap = 1.0 - eigen.max();
    let max_gap = 1.0 - eigen.min();
    let valid = min_gap > 0.0 && rho.is_none_or(|r| max_gap < r);
    TorusValidity {
        valid,
        min_gap,
        max_gap,
    }
}

/// `1 - Σ θ[i,j] cos(i ω1 + j ω2)` at each frequency.
pub fn spectral_density_plane(coeffs: &[(Offset, f64)], omega: &[(f64, f64)]) -> Vec<f64> {
    omega
        .iter()
        .map(|&(w1, w2)| {
            1.0 - coeffs
                .iter()
                .map(|&((i, j), v)| v * (i as f64 * w1 + j as f64 * w2).cos())
                .sum::<f64>()
        })
        .collect()
}

/// `2π/res · Σ |θ[i,j]| (|i| + |j|)`: bounds how far the density may dip
/// between nodes of a `res × res` frequency grid.
pub fn lipschitz_margin(coeffs: &[(Offset, f64)], res: usize) -> f64 {
    let l1: f64 = coeffs
        .iter()
        .map(|&((i, j), v)| v.abs() * (i.unsigned_abs() + j.unsigned_abs()) as f64)
        .sum();
    2.0 * PI * l1 / res as f64
}

/// Density `1 - Σ θ cos(...)` on the uniform grid `ω = 2π (a, b) / res`.
///
/// Evaluated separably, `Σ_j [A_j(a) cos(j ω2) - B_j(a) sin(j ω2)]` with
/// `A_j + i B_j = Σ_i θ[i,j] e^{i i ω1}`, on half the grid; central symmetry
/// of the coefficients fills the other half.
pub fn plane_density_grid(coeffs: &[(Offset, f64)], res: usize) -> Array2<f64> {
    let r = res as i64;
    let cos: Vec<f64> = (0..res).map(|k| (2.0 * PI * k as f64 / res as f64).cos()).collect();
    let sin: Vec<f64> = (0..res).map(|k| (2.0 * PI * k as f64 / res as f64).sin()).collect();
    let mut cols: Vec<i64> = coeffs.iter().map(|&((_, j), _)| j as i64).collect();
    cols.sort_unstable();
    cols.dedup();
    let mut g = Array2::<f64>::zeros((res, res));
    let mut a = vec![0.0; cols.len()];
    let mut b = vec![0.0; cols.len()];
    let step: Vec<usize> = cols.iter().map(|&j| j.rem_euclid(r) as usize).collect();
    let mut phase = vec![0usize; cols.len()];
    for u in 0..=res / 2 {
        a.iter_mut().chain(b.iter_mut()).for_each(|x| *x = 0.0);
        for &((i, j), v) in coeffs {
            let c = cols.binary_search(&(j as i64)).expect("column listed");
            let k = (i as i64 * u as i64).rem_euclid(r) as usize;
            a[c] += v * cos[k];
            b[c] += v * sin[k];
        }
        // phase index of column c at v is (step[c] * v) mod res
        phase.iter_mut().for_each(|k| *k = 0);
        for v in 0..res {
            let mut s = 0.0;
            for c in 0..cols.len() {
                let k = phase[c];
                s += a[c] * cos[k] - b[c] * sin[k];
                phase[c] = if k + step[c] >= res { k + step[c] - res } else { k + step[c] };
            }
            g[[u, v]] = 1.0 - s;
            g[[(res - u) % res, (res - v) % res]] = 1.0 - s;
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneValidity {
    pub valid: bool,
    pub grid_min: f64,
    pub margin: f64,
    /// Grid index `(a, b)` of the minimum, `ω = 2π (a, b) / res`.
    pub argmin: (usize, usize),
}

/// Grid check of the positivity condition with the Lipschitz safety margin.
pub fn check_plane_validity(coeffs: &[(Offset, f64)], res: usize) -> PlaneValidity {
    let grid = plane_density_grid(coeffs, res);
    let (mut grid_min, mut argmin) = (f64::INFINITY, (0, 0));
    for (k, &v) in grid.as_slice().expect("standard layout").iter().enumerate() {
        if v < grid_min {
            grid_min = v;
            argmin = (k / res, k % res);
        }
    }
    let margin = lipschitz_margin(coeffs, res);
    PlaneValidity {
        valid: grid_min - margin > 0.0,
        grid_min,
        margin,
        argmin,
    }
}

/// Default resolution of the plane frequency grid.
pub const DEFAULT_GRID_RESOLUTION: usize = 512;
