//! Exact samplers for torus GMRFs and for stationary fields observed on a
//! window of `Z^2`, together with the parametric correlation families.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array3, ArrayView2};
use rustfft::num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bessel::bessel_k;
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::params::{covariance_from_theta, ThetaField};
use crate::spectral::{fft2_in_place, fft2_real};

/// Windows up to this many nodes are sampled by dense Cholesky.
pub const DENSE_SAMPLER_LIMIT: usize = 2500;

const EMBEDDING_TOL: f64 = 1e-8;

/// Radius `√17` of the neighborhood carrying `θ^φ`.
pub const THETA_PHI_RADIUS_SQ: i64 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationFamily {
    Exponential,
    Circular,
    Spherical,
    Matern,
}

impl CorrelationFamily {
    pub fn name(&self) -> &'static str {
        match self {
            CorrelationFamily::Exponential => "exponential",
            CorrelationFamily::Circular => "circular",
            CorrelationFamily::Spherical => "spherical",
            CorrelationFamily::Matern => "matern",
        }
    }
}

impl std::str::FromStr for CorrelationFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" | "exp" => Ok(CorrelationFamily::Exponential),
            "circular" => Ok(CorrelationFamily::Circular),
            "spherical" => Ok(CorrelationFamily::Spherical),
            "matern" => Ok(CorrelationFamily::Matern),
            other => Err(Error::InvalidParameter(format!("unknown correlation family '{other}'"))),
        }
    }
}

/// Stationary covariance `variance * ρ(d / range)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationModel {
    pub family: CorrelationFamily,
    pub range: f64,
    /// Smoothness; only read by the Matérn family.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_variance")]
    pub variance: f64,
}

fn default_kappa() -> f64 {
    0.5
}

fn default_variance() -> f64 {
    1.0
}

impl CorrelationModel {
    pub fn new(family: CorrelationFamily, range: f64, kappa: f64, variance: f64) -> Result<Self> {
        let m = Self {
            family,
            range,
            kappa,
            variance,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn exponential(range: f64) -> Self {
        Self {
            family: CorrelationFamily::Exponential,
            range,
            kappa: 0.5,
            variance: 1.0,
        }
    }

    pub fn matern(range: f64, kappa: f64) -> Self {
        Self {
            family: CorrelationFamily::Matern,
            range,
            kappa,
            variance: 1.0,
        }
    }

    pub fn with_family(family: CorrelationFamily, range: f64) -> Self {
        Self {
            family,
            range,
            kappa: 0.5,
            variance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::InvalidParameter(format!("range must be positive, got {}", self.range)));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variance must be positive, got {}",
                self.variance
            )));
        }
        if self.family == CorrelationFamily::Matern && !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa must be positive, got {}", self.kappa)));
        }
        Ok(())
    }

    /// Correlation at euclidean distance `d` (no variance factor).
    pub fn correlation(&self, d: f64) -> f64 {
        if d == 0.0 {
            return 1.0;
        }
        let t = d / self.range;
        match self.family {
            CorrelationFamily::Exponential => (-t).exp(),
            CorrelationFamily::Spherical => {
                if t < 1.0 {
                    1.0 - 1.5 * t + 0.5 * t * t * t
                } else {
                    0.0
                }
            }
            CorrelationFamily::Circular => {
                if t < 1.0 {
                    1.0 - 2.0 / PI * (t * (1.0 - t * t).sqrt() + t.asin())
                } else {
                    0.0
                }
            }
            CorrelationFamily::Matern => matern(self.kappa, t),
        }
    }
}

fn matern(kappa: f64, t: f64) -> f64 {
    if kappa >= 1.0 && t < 1e-12 {
        // t^κ K_κ(t) overflows before it departs from its limit
        return 1.0;
    }
    if t > 700.0 {
        return 0.0;
    }
    let k = bessel_k(kappa, t).expect("positive argument");
    let log_norm = (kappa - 1.0) * std::f64::consts::LN_2 + statrs::function::gamma::ln_gamma(kappa);
    (kappa * t.ln() + k.ln() - log_norm).exp().min(1.0)
}

/// Geometric anisotropy: coordinates are rotated by `rotation` and the
/// second axis is shrunk by `ratio`, so ranges differ by that factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnisotropySpec {
    pub ratio: f64,
    #[serde(default)]
    pub rotation: f64,
}

impl AnisotropySpec {
    pub fn new(ratio: f64, rotation: f64) -> Result<Self> {
        if !(ratio >= 1.0 && ratio.is_finite()) || !rotation.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "anisotropy ratio must be >= 1, got {ratio}"
            )));
        }
        Ok(Self { ratio, rotation })
    }

    /// Effective isotropic distance of the lag `h`.
    pub fn distance(&self, h: (f64, f64)) -> f64 {
        let (s, c) = self.rotation.sin_cos();
        let u = c * h.0 - s * h.1;
        let v = (s * h.0 + c * h.1) / self.ratio;
        u.hypot(v)
    }
}

/// `Cov(X[0,0], X[h])` under `model`, with optional anisotropy.
pub fn correlation_value(model: &CorrelationModel, offset: (f64, f64), aniso: Option<&AnisotropySpec>) -> f64 {
    let d = match aniso {
        Some(a) => a.distance(offset),
        None => offset.0.hypot(offset.1),
    };
    model.variance * model.correlation(d)
}

/// `n` replications of a field on a lattice window, shape `(n, p1, p2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldObservations {
    pub lattice: LatticeSpec,
    pub data: Array3<f64>,
}

impl FieldObservations {
    pub fn new(lattice: LatticeSpec, data: Array3<f64>) -> Result<Self> {
        let (n, p1, p2) = data.dim();
        if n == 0 {
            return Err(Error::InvalidParameter("at least one replication is required".into()));
        }
        if (p1, p2) != (lattice.p1, lattice.p2) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", lattice.p1, lattice.p2),
                got: format!("{p1}x{p2}"),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("observations must be finite".into()));
        }
        Ok(Self { lattice, data })
    }

    pub fn n(&self) -> usize {
        self.data.dim().0
    }

    pub fn replication(&self, k: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![k, .., ..])
    }

    /// Header `p1, p2, n` as little-endian `u64`, then the values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for v in [self.lattice.p1, self.lattice.p2, self.n()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, toroidal: bool) -> Result<Self> {
        let mut header = [0u8; 24];
        r.read_exact(&mut header)?;
        let field = |k: usize| u64::from_le_bytes(header[8 * k..8 * k + 8].try_into().expect("8 bytes")) as usize;
        let (p1, p2, n) = (field(0), field(1), field(2));
        let lattice = LatticeSpec::new(p1, p2, toroidal)?;
        let count = n
            .checked_mul(p1 * p2)
            .ok_or_else(|| Error::InvalidParameter("header sizes overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * count {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes of data", 8 * count),
                got: format!("{} bytes", bytes.len()),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let data = Array3::from_shape_vec((n, p1, p2), values).expect("length checked");
        Self::new(lattice, data)
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(f)
    }

    pub fn load_binary(path: &Path, toroidal: bool) -> Result<Self> {
        Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?), toroidal)
    }

    /// Long-format CSV with columns `rep,row,col,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rep", "row", "col", "value"]).map_err(csv_err)?;
        for ((k, i, j), v) in self.data.indexed_iter() {
            out.serialize((k, i, j, v)).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, toroidal: bool) -> Result<Self> {
        let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
        for rec in csv::Reader::from_reader(r).deserialize() {
            rows.push(rec.map_err(csv_err)?);
        }
        let dim = |f: fn(&(usize, usize, usize, f64)) -> usize| rows.iter().map(f).max().map_or(0, |m| m + 1);
        let (n, p1, p2) = (dim(|r| r.0), dim(|r| r.1), dim(|r| r.2));
        if rows.len() != n * p1 * p2 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows for {n}x{p1}x{p2}", n * p1 * p2),
                got: format!("{} rows", rows.len()),
            });
        }
        let lattice = LatticeSpec::new(p1, p2, toroidal)?;
        let mut data = Array3::from_elem((n, p1, p2), f64::NAN);
        for (k, i, j, v) in rows {
            data[[k, i, j]] = v;
        }
        Self::new(lattice, data)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidParameter(format!("csv: {e}"))
}

/// Per-replication RNG: stream `index` of the ChaCha generator keyed by `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Independent child seed for nested experiments (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn white_noise(rng: &mut ChaCha8Rng, p1: usize, p2: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((p1, p2), || rng.sample(StandardNormal))
}

/// `θ^φ`: value `φ` on every offset with `0 < |o|_t <= √17`, `σ² = 1`.
pub fn make_theta_phi(phi: f64, lattice: &LatticeSpec) -> Result<ThetaField> {
    if !lattice.toroidal {
        return Err(Error::TorusRequired("theta^phi"));
    }
    if !(phi >= 0.0 && phi.is_finite()) {
        return Err(Error::InvalidParameter(format!("phi must be nonnegative, got {phi}")));
    }
    let coeffs = Array2::from_shape_fn((lattice.p1, lattice.p2), |(a, b)| {
        let n = lattice.norm_sq((a as i32, b as i32));
        if n > 0 && n <= THETA_PHI_RADIUS_SQ {
            phi
        } else {
            0.0
        }
    });
    let theta = ThetaField::new(*lattice, coeffs, 1.0, true)?;
    let v = theta.validity(None)?;
    if !v.valid {
        return Err(Error::InvalidTheta { min_gap: v.min_gap });
    }
    Ok(theta)
}

/// Multiplies the spectrum of white noise by `sqrt(spectrum)`; for a
/// centrally symmetric nonnegative spectrum the output is real and has
/// covariance equal to the circulant matrix with that spectrum.
fn spectral_filter(noise: &Array2<f64>, sqrt_spectrum: &Array2<f64>) -> Array2<f64> {
    let n = noise.len() as f64;
    let mut g = fft2_real(noise);
    g.zip_mut_with(sqrt_spectrum, |z, &s| *z *= s);
    fft2_in_place(&mut g, true);
    g.mapv(|z: Complex64| z.re / n)
}

/// `n` exact draws from `N(0, σ²(I - C(θ))⁻¹)` on a torus; replication `k`
/// uses [`substream`]`(seed, k)`.
pub fn sample_torus_gmrf(theta: &ThetaField, n: usize, seed: u64) -> Result<FieldObservations> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be positive".into()));
    }
    let cov = covariance_from_theta(theta)?;
    let sqrt_spec = cov.eigen.mapv(f64::sqrt);
    let l = theta.lattice;
    let mut data = Array3::zeros((n, l.p1, l.p2));
    for k in 0..n {
        let mut rng = substream(seed, k as u64);
        let w = white_noise(&mut rng, l.p1, l.p2);
        data.slice_mut(s![k, .., ..]).assign(&spectral_filter(&w, &sqrt_spec));
    }
    FieldObservations::new(l, data)
}

/// Window covariance `Cov(X[x], X[y])` in row-major node order.
pub fn window_covariance(
    model: &CorrelationModel,
    lattice: &LatticeSpec,
    aniso: Option<&AnisotropySpec>,
) -> DMatrix<f64> {
    let (p1, p2) = (lattice.p1, lattice.p2);
    let n = p1 * p2;
    // stationarity: tabulate once per lag
    let lag = Array2::from_shape_fn((2 * p1 - 1, 2 * p2 - 1), |(a, b)| {
        correlation_value(model, (a as f64 - (p1 - 1) as f64, b as f64 - (p2 - 1) as f64), aniso)
    });
    DMatrix::from_fn(n, n, |r, c| {
        let (i1, j1) = (r / p2, r % p2);
        let (i2, j2) = (c / p2, c % p2);
        lag[[i2 + p1 - 1 - i1, j2 + p2 - 1 - j1]]
    })
}

#[derive(Debug, Clone)]
enum PlaneMethod {
    Dense(DMatrix<f64>),
    Embedding { sqrt_spectrum: Array2<f64> },
}

/// Reusable exact sampler for a stationary field on a `p1 x p2` window.
#[derive(Debug, Clone)]
pub struct PlaneSampler {
    pub lattice: LatticeSpec,
    method: PlaneMethod,
}

impl PlaneSampler {
    pub fn new(model: &CorrelationModel, lattice: &LatticeSpec, aniso: Option<&AnisotropySpec>) -> Result<Self> {
        if lattice.toroidal {
            return Err(Error::PlaneRequired("window sampler"));
        }
        model.validate()?;
        let method = if lattice.size() <= DENSE_SAMPLER_LIMIT {
            let cov = window_covariance(model, lattice, aniso);
            let chol = cov.cholesky().ok_or_else(|| {
                Error::NotPositiveDefinite(format!("{:?} covariance on a {}x{} window", model.family, lattice.p1, lattice.p2))
            })?;
            PlaneMethod::Dense(chol.l())
        } else {
            match embedding_spectrum(model, lattice, aniso, 2) {
                Ok(s) => PlaneMethod::Embedding { sqrt_spectrum: s },
                Err(_) => {
                    log::warn!("circulant embedding with padding 2 failed; retrying with padding 4");
                    PlaneMethod::Embedding {
                        sqrt_spectrum: embedding_spectrum(model, lattice, aniso, 4)?,
                    }
                }
            }
        };
        Ok(Self {
            lattice: *lattice,
            method,
        })
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.method, PlaneMethod::Dense(_))
    }

    /// Replication `k` uses [`substream`]`(seed, k)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<FieldObservations> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        let (p1, p2) = (self.lattice.p1, self.lattice.p2);
        let mut data = Array3::zeros((n, p1, p2));
        for k in 0..n {
            let mut rng = substream(seed, k as u64);
            let field = match &self.method {
                PlaneMethod::Dense(l) => {
                    let z = DVector::from_fn(p1 * p2, |_, _| rng.sample(StandardNormal));
                    let x = l * z;
                    Array2::from_shape_fn((p1, p2), |(i, j)| x[i * p2 + j])
                }
                PlaneMethod::Embedding { sqrt_spectrum } => {
                    let (m1, m2) = sqrt_spectrum.dim();
                    let w = white_noise(&mut rng, m1, m2);
                    spectral_filter(&w, sqrt_spectrum).slice(s![..p1, ..p2]).to_owned()
                }
            };
            data.slice_mut(s![k, .., ..]).assign(&field);
        }
        FieldObservations::new(self.lattice, data)
    }
}

/// Square root of the spectrum of the covariance wrapped onto a torus
/// `pad` times larger than the window.
fn embedding_spectrum(
    model: &CorrelationModel,
    lattice: &LatticeSpec,
    aniso: Option<&AnisotropySpec>,
    pad: usize,
) -> Result<Array2<f64>> {
    let (m1, m2) = (pad * lattice.p1, pad * lattice.p2);
    let big = LatticeSpec::torus(m1, m2)?;
    let base = Array2::from_shape_fn((m1, m2), |(a, b)| {
        let (i, j) = big.representative(a as i64, b as i64);
        correlation_value(model, (i as f64, j as f64), aniso)
    });
    // enforce exact central symmetry at the ambiguous half-period lags
    let sym = Array2::from_shape_fn((m1, m2), |(a, b)| 0.5 * (base[[a, b]] + base[[(m1 - a) % m1, (m2 - b) % m2]]));
    let spec = fft2_real(&sym).mapv(|z| z.re);
    let max = spec.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = spec.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -EMBEDDING_TOL * max.max(1.0) {
        return Err(Error::EmbeddingFailed { min_eig: min, max_eig: max });
    }
    Ok(spec.mapv(|v| v.max(0.0).sqrt()))
}

/// Convenience wrapper building a [`PlaneSampler`] and drawing once.
pub fn sample_plane_window(
    model: &CorrelationModel,
    lattice: &LatticeSpec,
    n: usize,
    aniso: Option<&AnisotropySpec>,
    seed: u64,
) -> Result<FieldObservations> {
    PlaneSampler::new(model, lattice, aniso)?.sample(n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_model_collection;
    use crate::testutil::rel_close;
    use proptest::prelude::*;

    fn mean_sd(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v.sqrt())
    }

    #[test]
    fn theta_phi_examples() {
        let l = LatticeSpec::torus(20, 20).unwrap();
        let z = make_theta_phi(0.0, &l).unwrap();
        assert!(z.coeffs.iter().all(|&v| v == 0.0));
        let th = make_theta_phi(0.015, &l).unwrap();
        assert_eq!(th.nonzero().len(), 56);
        assert!((th.l1_norm() - 0.84).abs() < 1e-12);
        // support is exactly m10 of the isotropic collection, one value per class
        let c = build_model_collection(&l, 10, true).unwrap();
        let m10 = c.largest();
        assert_eq!(m10.d_m_iso, 10);
        assert!(th.nonzero().iter().all(|(o, _)| m10.contains(*o)));
        assert!(make_theta_phi(0.02, &l).is_err());
        assert!(make_theta_phi(0.01, &LatticeSpec::plane(20, 20).unwrap()).is_err());
    }

    #[test]
    fn correlation_examples() {
        let e = CorrelationModel::exponential(3.0);
        assert!(rel_close(correlation_value(&e, (3.0, 0.0), None), (-1.0f64).exp(), 1e-15));
        for fam in [
            CorrelationFamily::Exponential,
            CorrelationFamily::Circular,
            CorrelationFamily::Spherical,
            CorrelationFamily::Matern,
        ] {
            let m = CorrelationModel::new(fam, 3.0, 1.5, 2.5).unwrap();
            assert_eq!(correlation_value(&m, (0.0, 0.0), None), 2.5);
        }
        let sph = CorrelationModel::with_family(CorrelationFamily::Spherical, 3.0);
        assert_eq!(correlation_value(&sph, (4.0, 0.0), None), 0.0);
        let circ = CorrelationModel::with_family(CorrelationFamily::Circular, 3.0);
        assert_eq!(circ.correlation(3.0), 0.0);
        assert!(circ.correlation(2.999_999).abs() < 1e-4);
        let m = CorrelationModel::matern(3.0, 0.5);
        for k in 1..60 {
            let d = k as f64 * 0.37;
            assert!(rel_close(m.correlation(d), e.correlation(d), 1e-12), "d={d}");
        }
        assert!(CorrelationModel::new(CorrelationFamily::Matern, 1.0, 0.0, 1.0).is_err());
        assert!(CorrelationModel::new(CorrelationFamily::Exponential, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn matern_small_distance_limit() {
        for &kappa in &[0.05, 0.25, 1.0, 2.0, 4.0, 10.0] {
            let m = CorrelationModel::matern(3.0, kappa);
            let near = m.correlation(1e-9);
            assert!(near <= 1.0 && near > 0.3, "kappa={kappa}: {near}");
            assert!(m.correlation(1e-3) <= 1.0);
        }
    }

    #[test]
    fn correlations_nonincreasing() {
        for fam in [
            CorrelationFamily::Exponential,
            CorrelationFamily::Circular,
            CorrelationFamily::Spherical,
            CorrelationFamily::Matern,
        ] {
            for &kappa in &[0.05, 0.5, 2.0] {
                let m = CorrelationModel::new(fam, 3.0, kappa, 1.0).unwrap();
                let mut prev = m.correlation(0.0);
                for k in 1..400 {
                    let c = m.correlation(k as f64 * 0.025);
                    assert!(c <= prev + 1e-15, "{fam:?} kappa={kappa} d={}", k as f64 * 0.025);
                    prev = c;
                }
            }
        }
    }

    #[test]
    fn unit_anisotropy_is_identity() {
        let a = AnisotropySpec::new(1.0, 0.0).unwrap();
        let m = CorrelationModel::matern(3.0, 0.25);
        for &h in &[(1.0, 0.0), (2.0, 3.0), (-4.0, 1.0)] {
            assert_eq!(correlation_value(&m, h, Some(&a)), correlation_value(&m, h, None));
        }
        let a2 = AnisotropySpec::new(2.0, 0.0).unwrap();
        assert!(rel_close(a2.distance((0.0, 4.0)), 2.0, 1e-15));
        assert!(rel_close(a2.distance((4.0, 0.0)), 4.0, 1e-15));
        assert!(AnisotropySpec::new(0.5, 0.0).is_err());
    }

    #[test]
    fn torus_sampler_is_deterministic() {
        let l = LatticeSpec::torus(6, 5).unwrap();
        let th = make_theta_phi(0.0, &l).unwrap();
        let a = sample_torus_gmrf(&th, 3, 42).unwrap();
        let b = sample_torus_gmrf(&th, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_torus_gmrf(&th, 3, 43).unwrap();
        assert_ne!(a, c);
        // replications are distinct substreams
        assert_ne!(a.replication(0), a.replication(1));
    }

    #[test]
    fn white_noise_variance() {
        let l = LatticeSpec::torus(10, 10).unwrap();
        let th = ThetaField::zeros(l, 2.0);
        let x = sample_torus_gmrf(&th, 1000, 5).unwrap();
        let sq: Vec<f64> = x.data.iter().map(|v| v * v).collect();
        let (m, sd) = mean_sd(&sq);
        assert!((m - 2.0).abs() < 3.0 * sd / (sq.len() as f64).sqrt(), "mean {m}");
    }

    #[test]
    fn torus_lag_covariance_matches_spectral() {
        let l = LatticeSpec::torus(20, 20).unwrap();
        let th = make_theta_phi(0.015, &l).unwrap();
        let c = covariance_from_theta(&th).unwrap().covariance_function();
        let reps = 10_000;
        let x = sample_torus_gmrf(&th, reps, 11).unwrap();
        let prods: Vec<f64> = (0..reps).map(|k| x.data[[k, 0, 0]] * x.data[[k, 1, 0]]).collect();
        let (m, sd) = mean_sd(&prods);
        assert!((m - c[[1, 0]]).abs() < 3.0 * sd / (reps as f64).sqrt(), "{m} vs {}", c[[1, 0]]);
    }

    #[test]
    fn plane_dense_and_embedding_agree_in_law() {
        let m = CorrelationModel::exponential(2.0);
        let small = LatticeSpec::plane(6, 6).unwrap();
        let dense = PlaneSampler::new(&m, &small, None).unwrap();
        assert!(dense.is_dense());
        let emb = embedding_spectrum(&m, &small, None, 2).unwrap();
        let sampler = PlaneSampler {
            lattice: small,
            method: PlaneMethod::Embedding { sqrt_spectrum: emb },
        };
        let reps = 20_000;
        let x = sampler.sample(reps, 9).unwrap();
        let prods: Vec<f64> = (0..reps).map(|k| x.data[[k, 2, 2]] * x.data[[k, 2, 3]]).collect();
        let (mu, sd) = mean_sd(&prods);
        let want = m.correlation(1.0);
        assert!((mu - want).abs() < 3.5 * sd / (reps as f64).sqrt(), "{mu} vs {want}");
    }

    #[test]
    fn large_window_uses_embedding() {
        let m = CorrelationModel::exponential(3.0);
        let l = LatticeSpec::plane(60, 60).unwrap();
        let s = PlaneSampler::new(&m, &l, None).unwrap();
        assert!(!s.is_dense());
        let x = s.sample(2, 1).unwrap();
        assert_eq!(x.data.dim(), (2, 60, 60));
    }

    #[test]
    fn tiny_range_is_nearly_white() {
        let m = CorrelationModel::exponential(1e-3);
        let l = LatticeSpec::plane(8, 8).unwrap();
        let x = sample_plane_window(&m, &l, 2000, None, 3).unwrap();
        let prods: Vec<f64> = (0..2000).map(|k| x.data[[k, 3, 3]] * x.data[[k, 3, 4]]).collect();
        let (mu, sd) = mean_sd(&prods);
        assert!(mu.abs() < 3.0 * sd / (2000f64).sqrt());
    }

    #[test]
    fn binary_and_csv_roundtrip() {
        let l = LatticeSpec::torus(4, 3).unwrap();
        let x = sample_torus_gmrf(&ThetaField::zeros(l, 1.0), 2, 1).unwrap();
        let mut buf = Vec::new();
        x.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 8 * 24);
        assert_eq!(&buf[..8], &4u64.to_le_bytes());
        assert_eq!(FieldObservations::read_binary(&buf[..], true).unwrap(), x);
        assert!(FieldObservations::read_binary(&buf[..buf.len() - 1], true).is_err());
        let mut csv = Vec::new();
        x.write_csv(&mut csv).unwrap();
        assert_eq!(FieldObservations::read_csv(&csv[..], true).unwrap(), x);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn derived_seeds_differ(seed in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
            prop_assume!(a != b);
            prop_assert_ne!(derive_seed(seed, a), derive_seed(seed, b));
        }
    }
}
