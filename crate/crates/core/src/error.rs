//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },
    #[error("matrix is not symmetric: max |A - A^T| entry is {max_dev:e}")]
    Asymmetric { max_dev: f64 },
    #[error("no convergence after {sweeps} sweeps")]
    NotConverged { sweeps: usize },
    #[error("ill-conditioned Gram matrix: eigenvalue {eigenvalue:e} below threshold")]
    IllConditioned { eigenvalue: f64 },
    #[error("singular value {sigma:e} too small for mode {mode}")]
    TinySingularValue { mode: usize, sigma: f64 },
    #[error("operator anomaly at batch point {point}: |value| = {value:e} exceeds {threshold:e}")]
    Anomaly { point: usize, value: f64, threshold: f64 },
    #[error("training aborted: {0}")]
    TrainingAborted(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
