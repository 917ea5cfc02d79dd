use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported dimension n = {0} (supported: 3 <= n <= {max})", max = crate::MAX_DIMENSION)]
    UnsupportedDimension(usize),

    #[error("polar decomposition needs det > 0 and sigma_min > tol (det = {det:.3e}, sigma_min = {sigma_min:.3e}, tol = {tol:.3e})")]
    SingularInput { det: f64, sigma_min: f64, tol: f64 },

    #[error("canonical angles are ill-conditioned: {0}")]
    IllConditioned(String),

    #[error("non-finite integrand value at torus point {0:?}")]
    NonFinite(Vec<f64>),

    #[error("stiffness matrix is not positive definite (basis or quadrature defect)")]
    PositiveDefinitenessFailure,

    #[error("degenerate normalization integral |I_a| = {0:.3e}")]
    DegenerateDenominator(f64),

    #[error("torus point {point:?} lies within {delta} of the singular set")]
    SingularPoint { point: Vec<f64>, delta: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
