//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by inference routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A matrix expected to be positive definite failed to factorize.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// A cavity distribution had a non-positive variance.
    #[error("invalid cavity: {0}")]
    InvalidCavity(String),

    /// Inner EP failed hard for one observation.
    #[error("inner EP failed for observation {observation}: {detail}")]
    InnerEp { observation: usize, detail: String },

    /// A computation produced a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An optimization run could not produce any usable evaluation.
    #[error("optimization failed: {0}")]
    Optimization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
