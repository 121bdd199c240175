//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, estimation, and reporting.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of inputs disagree (design matrices, weight matrices, points).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument violates its documented domain (levels, tolerances, counts).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A computation lost all precision or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Starting values could not be constructed from the data.
    #[error("initialization failed: {0}")]
    Init(String),
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
