//! Error type shared across the crate.

use thiserror::Error;

/// Unified error for tensor math, model plumbing, data ingestion and training.
#[derive(Debug, Error)]
pub enum CoclError {
    /// Shapes do not line up (matmul inner dims, elementwise operands, axes).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input outside an operation's mathematical domain (e.g. log of x <= 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerically degenerate input, e.g. a zero-norm row fed to row normalization.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An API contract was violated (non-scalar backward root, missing snapshot, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary input. `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// A computation produced non-finite values (overflow or NaN).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss.
    #[error("numeric divergence at task {task}, epoch {epoch}: {detail}")]
    Numeric {
        task: usize,
        epoch: usize,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoclError>;

impl CoclError {
    pub fn dimension(msg: impl Into<String>) -> Self {
        CoclError::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CoclError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoclError::Config(msg.into())
    }
}
