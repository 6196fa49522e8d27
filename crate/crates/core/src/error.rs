//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// Two tensors (or a tensor and an index) disagree on shape.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An on-disk artifact is malformed (bad magic, truncated blob,
    /// inconsistent header).
    #[error("format error: {0}")]
    Format(String),

    /// A structural invariant that should hold by construction was violated
    /// (non-finite value, cluster partition broken, unsorted output).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Lookup retrieved no keys for a query, so attention has nothing to
    /// normalize over.
    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
