//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by estimation, decomposition, and simulation routines.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Malformed or inconsistent input (dimension mismatch, non-finite
    /// entries, out-of-range parameters).
    #[error("invalid input: {0}")]
    Input(String),

    /// A numerical routine failed to produce a usable result.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A requested factor direction has a zero image under the design and
    /// cannot be rescaled.
    #[error("degenerate factor at index {index}: zero score norm")]
    DegenerateFactor { index: usize },

    /// The request exceeds a combinatorial or size guard and is refused
    /// rather than attempted.
    #[error("refused: {0}")]
    Refused(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn refused(msg: impl Into<String>) -> Self {
        Error::Refused(msg.into())
    }
}
