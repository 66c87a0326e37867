use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("basis is not unitary (max deviation {deviation:.3e})")]
    NonUnitaryBasis { deviation: f64 },

    #[error("{what} is not a unit vector (norm {norm:.15})")]
    NonUnitVector { what: &'static str, norm: f64 },

    #[error("matrix is not Hermitian (max deviation {deviation:.3e})")]
    NonHermitian { deviation: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("generating function is singular at z = {z}")]
    Singularity { z: Complex64 },

    #[error("boundary case: {0}")]
    BoundaryCase(String),

    #[error("eigenbasis is ill-conditioned (condition estimate {condition:.3e}); use the series method")]
    IllConditioned { condition: f64 },

    #[error("near-singular denominator: |lambda_j conj(lambda_k)| = {modulus}")]
    NearSingularDenominator { modulus: f64 },

    #[error("moment sum has imaginary residual {residual:.3e}")]
    ImaginaryResidual { residual: f64 },

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("amplitude series does not decay (spectral radius {radius:.6})")]
    NonDecaying { radius: f64 },

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
