use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// An empirical quantity was requested at an index without the required
    /// observations; callers fall back to an estimator.
    #[error("index {0} has no usable observations")]
    NotObserved(usize),

    #[error("signal unavailable: {0}")]
    Unavailable(String),

    #[error("no eligible index left to select")]
    ExhaustedPool,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
