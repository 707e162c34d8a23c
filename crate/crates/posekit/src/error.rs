//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by model construction, data handling and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A geometric value violated its invariant (degenerate box, bad size).
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// A tensor had an unexpected shape for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A non-finite value reached a place that requires finite input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Configuration is inconsistent or out of range.
    #[error("invalid config: {0}")]
    Config(String),

    /// A dataset record could not be parsed or referenced missing data.
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint file is unreadable or incompatible with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
