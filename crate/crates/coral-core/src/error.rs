//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoralError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    /// Degenerate numeric input, e.g. a zero-norm descriptor or a
    /// zero-variance series.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite value produced where a finite one is required; carries a
    /// diagnostic describing where it appeared.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoralError>;
