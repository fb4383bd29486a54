use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("symmetry violated at offset ({i}, {j}): {value} vs mirrored {mirror}")]
    SymmetryViolation {
        i: usize,
        j: usize,
        value: f64,
        mirror: f64,
    },

    #[error("eigenvalues are not real: imaginary part {imag:e} exceeds tolerance {tol:e}")]
    ComplexEigenvalues { imag: f64, tol: f64 },

    #[error("theta is outside the valid set: min(1 - lambda) = {min_gap:e}")]
    InvalidTheta { min_gap: f64 },

    #[error("dense oracle limited to {limit} nodes, got {size}")]
    SizeGuard { size: usize, limit: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("normal equations are rank deficient (rank {rank} < {dim}); data may be degenerate")]
    RankDeficient { rank: usize, dim: usize },

    #[error("sublattice is empty: {0}")]
    EmptySublattice(String),

    #[error("sublattice node ({0}, {1}) is not contained in the model's admissible sublattice")]
    SublatticeNotContained(usize, usize),

    #[error("no dimension jump detected: selection path is constant")]
    NoJump,

    #[error("empty fit list")]
    EmptyFitList,

    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("circulant embedding failed: min eigenvalue {min_eig:e} relative to max {max_eig:e}")]
    EmbeddingFailed { min_eig: f64, max_eig: f64 },

    #[error("kriging system is singular for a {window}x{window} window; try a smaller window")]
    SingularKriging { window: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{0} did not converge after {1} iterations")]
    NoConvergence(&'static str, usize),

    #[error("torus required: {0}")]
    TorusRequired(&'static str),

    #[error("non-toroidal lattice required: {0}")]
    PlaneRequired(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical breakdown.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidLattice(_)
                | Error::InvalidParameter(_)
                | Error::ShapeMismatch { .. }
                | Error::TorusRequired(_)
                | Error::PlaneRequired(_)
                | Error::SizeGuard { .. }
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}
