//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input that a caller could have checked up front.
    #[error("validation error: {0}")]
    Validation(String),
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A numerical computation produced a non-finite or inconsistent value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A matrix required to be invertible was (numerically) singular.
    #[error("rank error: {0}")]
    Rank(String),
    /// An iterative solver failed to reach its stopping criterion.
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    /// Malformed input file; `row` is 1-based and counts the header.
    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for bad inputs, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Domain(_) | Error::Ingest { .. } | Error::Io(_) => 2,
            Error::Numeric(_) | Error::Rank(_) | Error::NonConvergence { .. } => 3,
        }
    }
}
