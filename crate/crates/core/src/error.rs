//! Error taxonomy shared across the library.
//!
//! Three broad kinds: invalid arguments (bad shapes, bad config), numeric
//! failures (singular systems, non-finite losses, fatal non-convergence), and
//! I/O or serialization problems. The CLI maps these onto exit codes.

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed inconsistent shapes, out-of-range values, or a bad config.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation failed numerically (singular matrix, non-finite loss, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Filesystem problem while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization problem.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// CSV (de)serialization problem.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for an `InvalidArgument` error.
pub fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Shorthand for a `Numeric` error.
pub fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
