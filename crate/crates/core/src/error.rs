use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("inner product {spec} is not defined on {domain} geometry")]
    UnsupportedInnerProduct { spec: String, domain: String },

    #[error("coefficient field is not coercive: min a = {min_value:e}")]
    NotCoercive { min_value: f64 },

    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("norm bound violated at step {step}: {norm:e} > {bound:e}")]
    NormBound { step: usize, norm: f64, bound: f64 },

    #[error("energy identity violated: relative defect {0:e}")]
    EnergyIdentity(f64),

    #[error("checksum mismatch in {path}: manifest {expected}, data {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("unsupported schema version {0}")]
    Schema(u32),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
