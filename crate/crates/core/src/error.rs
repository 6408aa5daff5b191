//! Crate-wide error type. One enum keeps the call sites uniform; variants
//! mirror the failure classes callers are expected to branch on.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An API contract was violated (non-scalar loss, detached graph, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Caller-supplied data is invalid (empty corpus, bad label set, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Configuration value out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation on finite inputs produced NaN or infinity.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// A persisted artifact failed its integrity or version check.
    #[error("integrity: {0}")]
    Integrity(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
