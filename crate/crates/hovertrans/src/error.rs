//! Crate-wide error type.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid architecture or geometry (divisibility, head counts, alignment).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid user-supplied data (labels, duplicate ids, bad config keys).
    #[error("validation error: {0}")]
    Validation(String),

    /// A referenced input could not be read or decoded.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Tensor shape does not match the operation contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A metric has no defined value on the given inputs (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Failure during training or inference (NaN loss, corrupt checkpoint).
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for input/validation problems,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Ingestion(_)
            | Error::Shape(_)
            | Error::UndefinedMetric(_) => 1,
            Error::Runtime(_) | Error::Io(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
