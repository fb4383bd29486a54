//! The conditional-regression parameter `θ` with its conditional variance,
//! the valid parameter sets and the map `Σ = σ² (I - C(θ))⁻¹`.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{full_lattice_classes, LatticeSpec, NeighborhoodModel, Offset};
use crate::spectral::{dft2_eigenvalues, fft2_real, is_valid_torus, EigenGrid, TorusValidity};

/// Largest lattice (in nodes) for which dense matrices are assembled.
pub const DENSE_LIMIT: usize = 4096;

const SYMMETRY_TOL: f64 = 1e-10;

/// Coefficients `θ` (indexed by offset modulo the lattice) and `σ²`.
///
/// On a plane window `θ` is a finite-support function on `Z^2`; its support
/// always lies strictly within half the window, so storing it modulo
/// `(p1, p2)` is unambiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaField {
    pub lattice: LatticeSpec,
    pub coeffs: Array2<f64>,
    pub sigma2: f64,
    pub iso: bool,
}

impl ThetaField {
    pub fn zeros(lattice: LatticeSpec, sigma2: f64) -> Self {
        Self {
            lattice,
            coeffs: Array2::zeros((lattice.p1, lattice.p2)),
            sigma2,
            iso: true,
        }
    }

    /// Validates shape, `θ[0,0] = 0`, central symmetry and (if `iso`)
    /// isotropy before wrapping the coefficients.
    pub fn new(lattice: LatticeSpec, coeffs: Array2<f64>, sigma2: f64, iso: bool) -> Result<Self> {
        if coeffs.dim() != (lattice.p1, lattice.p2) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", lattice.p1, lattice.p2),
                got: format!("{}x{}", coeffs.dim().0, coeffs.dim().1),
            });
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
        }
        let scale = coeffs.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        if coeffs[[0, 0]].abs() > SYMMETRY_TOL * scale {
            return Err(Error::InvalidParameter(format!(
                "theta[0,0] must be 0, got {}",
                coeffs[[0, 0]]
            )));
        }
        crate::spectral::check_central_symmetry(&coeffs, SYMMETRY_TOL * scale)?;
        if iso {
            for class in full_lattice_classes(&lattice, true) {
                let (a0, b0) = lattice.wrap(class[0].0 as i64, class[0].1 as i64);
                let v0 = coeffs[[a0, b0]];
                for &(i, j) in &class[1..] {
                    let (a, b) = lattice.wrap(i as i64, j as i64);
                    if (coeffs[[a, b]] - v0).abs() > SYMMETRY_TOL * scale {
                        return Err(Error::SymmetryViolation {
                            i: a,
                            j: b,
                            value: coeffs[[a, b]],
                            mirror: v0,
                        });
                    }
                }
            }
        }
        Ok(Self {
            lattice,
            coeffs,
            sigma2,
            iso,
        })
    }

    /// Builds `θ` from one value per symmetry class of `model`.
    pub fn from_class_values(
        lattice: LatticeSpec,
        model: &NeighborhoodModel,
        iso: bool,
        values: &[f64],
        sigma2: f64,
    ) -> Self {
        let classes = model.classes(iso);
        assert_eq!(classes.len(), values.len(), "one value per class");
        let mut coeffs = Array2::zeros((lattice.p1, lattice.p2));
        for (class, &v) in classes.iter().zip(values) {
            for &(i, j) in class {
                let (a, b) = lattice.wrap(i as i64, j as i64);
                coeffs[[a, b]] = v;
            }
        }
        Self {
            lattice,
            coeffs,
            sigma2,
            iso,
        }
    }

    pub fn get(&self, o: Offset) -> f64 {
        let (a, b) = self.lattice.wrap(o.0 as i64, o.1 as i64);
        self.coeffs[[a, b]]
    }

    /// Nonzero coefficients keyed by their representative offsets.
    pub fn nonzero(&self) -> Vec<(Offset, f64)> {
        self.coeffs
            .indexed_iter()
            .filter(|(_, &v)| v != 0.0)
            .map(|((a, b), &v)| (self.lattice.representative(a as i64, b as i64), v))
            .collect()
    }

    pub fn l1_norm(&self) -> f64 {
        self.coeffs.iter().map(|v| v.abs()).sum()
    }

    pub fn eigenvalues(&self) -> Result<EigenGrid> {
        dft2_eigenvalues(&self.coeffs)
    }

    pub fn validity(&self, rho: Option<f64>) -> Result<TorusValidity> {
        Ok(is_valid_torus(&self.eigenvalues()?, rho))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut nonzero: Vec<_> = self
            .nonzero()
            .into_iter()
            .map(|((i, j), value)| NonzeroEntry { i, j, value })
            .collect();
        nonzero.sort_by_key(|e| (e.i, e.j));
        serde_json::to_value(ThetaJson {
            p1: self.lattice.p1,
            p2: self.lattice.p2,
            toroidal: self.lattice.toroidal,
            sigma2: self.sigma2,
            iso: self.iso,
            nonzero,
        })
        .expect("theta serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let t: ThetaJson = serde_json::from_value(v.clone())?;
        let lattice = LatticeSpec::new(t.p1, t.p2, t.toroidal)?;
        let mut coeffs = Array2::zeros((t.p1, t.p2));
        for e in t.nonzero {
            let (a, b) = lattice.wrap(e.i as i64, e.j as i64);
            coeffs[[a, b]] = e.value;
        }
        Self::new(lattice, coeffs, t.sigma2, t.iso)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NonzeroEntry {
    i: i32,
    j: i32,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ThetaJson {
    p1: usize,
    p2: usize,
    #[serde(default = "default_true")]
    toroidal: bool,
    sigma2: f64,
    iso: bool,
    nonzero: Vec<NonzeroEntry>,
}

fn default_true() -> bool {
    true
}

/// Optional eigenvalue cap `ρ` on `I - C(θ)` and the strict-interior margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub rho: Option<f64>,
    pub min_gap: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            rho: None,
            min_gap: 1e-8,
        }
    }
}

impl ConstraintSpec {
    pub fn new(rho: Option<f64>, min_gap: f64) -> Result<Self> {
        if let Some(r) = rho {
            if !(r >= 2.0 && r.is_finite()) {
                return Err(Error::InvalidParameter(format!("rho must be at least 2, got {r}")));
            }
        }
        if !(min_gap >= 0.0) {
            return Err(Error::InvalidParameter(format!("min_gap must be nonnegative, got {min_gap}")));
        }
        Ok(Self { rho, min_gap })
    }

    pub fn with_rho(rho: f64) -> Result<Self> {
        Self::new(Some(rho), 1e-8)
    }

    /// Strict validity used for sampling: `min(1-λ) > min_gap` and the cap.
    pub fn admits(&self, v: &TorusValidity) -> bool {
        v.min_gap > self.min_gap && self.rho.is_none_or(|r| v.max_gap < r)
    }
}

/// Dense `C(θ)` with `C[(i1,j1),(i2,j2)] = θ[i2-i1, j2-j1]`.
pub fn build_circulant(theta: &ThetaField) -> Result<DMatrix<f64>> {
    let l = theta.lattice;
    if !l.toroidal {
        return Err(Error::TorusRequired("block-circulant assembly"));
    }
    let n = l.size();
    if n > DENSE_LIMIT {
        return Err(Error::SizeGuard {
            size: n,
            limit: DENSE_LIMIT,
        });
    }
    Ok(DMatrix::from_fn(n, n, |r, c| {
        let (i1, j1) = (r / l.p2, r % l.p2);
        let (i2, j2) = (c / l.p2, c % l.p2);
        theta.coeffs[[(i2 + l.p1 - i1) % l.p1, (j2 + l.p2 - j1) % l.p2]]
    }))
}

/// `Σ` of a torus GMRF, stored by its eigenvalues `σ²/(1-λ[i,j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCovariance {
    pub lattice: LatticeSpec,
    pub eigen: Array2<f64>,
}

impl SpectralCovariance {
    /// `φ_max(Σ) = σ² / min(1-λ)`.
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigen.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Stationary covariance function `c[k,l] = Cov(X[0,0], X[k,l])`.
    pub fn covariance_function(&self) -> Array2<f64> {
        let n = self.lattice.size() as f64;
        // eigenvalues are centrally symmetric, so the forward DFT equals the inverse one
        fft2_real(&self.eigen).mapv(|c| c.re / n)
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let l = self.lattice;
        if l.size() > DENSE_LIMIT {
            return Err(Error::SizeGuard {
                size: l.size(),
                limit: DENSE_LIMIT,
            });
        }
        let c = self.covariance_function();
        let n = l.size();
        Ok(DMatrix::from_fn(n, n, |r, s| {
            let (i1, j1) = (r / l.p2, r % l.p2);
            let (i2, j2) = (s / l.p2, s % l.p2);
            c[[(i2 + l.p1 - i1) % l.p1, (j2 + l.p2 - j1) % l.p2]]
        }))
    }
}

/// `Σ = σ² (I - C(θ))⁻¹` on a torus; requires `max λ < 1`.
pub fn covariance_from_theta(theta: &ThetaField) -> Result<SpectralCovariance> {
    if !theta.lattice.toroidal {
        return Err(Error::TorusRequired("spectral covariance"));
    }
    let eig = theta.eigenvalues()?;
    let v = is_valid_torus(&eig, None);
    if !v.valid {
        return Err(Error::InvalidTheta { min_gap: v.min_gap });
    }
    Ok(SpectralCovariance {
        lattice: theta.lattice,
        eigen: eig.values.mapv(|l| theta.sigma2 / (1.0 - l)),
    })
}

/// Orthogonal projection onto `Θ` (or `Θ^iso`): class-wise averaging with
/// the origin set to zero.
pub fn project_symmetry(raw: &Array2<f64>, lattice: &LatticeSpec, iso: bool) -> Result<Array2<f64>> {
    if raw.dim() != (lattice.p1, lattice.p2) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", lattice.p1, lattice.p2),
            got: format!("{}x{}", raw.dim().0, raw.dim().1),
        });
    }
    let mut out = Array2::zeros(raw.dim());
    for class in full_lattice_classes(lattice, iso) {
        let idx: Vec<_> = class
            .iter()
            .map(|&(i, j)| lattice.wrap(i as i64, j as i64))
            .collect();
        let mean = idx.iter().map(|&(a, b)| raw[[a, b]]).sum::<f64>() / idx.len() as f64;
        for (a, b) in idx {
            out[[a, b]] = mean;
        }
    }
    Ok(out)
}
