//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any mum operation.
#[derive(Debug, Error)]
pub enum MumError {
    /// Two array shapes that must agree do not.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single array has an unusable shape.
    #[error("{op}: bad shape {shape:?}: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// A caller broke an operation's contract.
    #[error("{op}: contract violation: {reason}")]
    Contract { op: &'static str, reason: String },

    /// Invalid configuration; `problems` lists every violation found.
    #[error("invalid configuration:\n{}", problems.join("\n"))]
    Config { problems: Vec<String> },

    /// Batch composition could not satisfy the request.
    #[error("sampling failed: {0}")]
    Sampling(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite {what} in {name}")]
    NonFinite { what: &'static str, name: String },

    /// Manifest file did not parse.
    #[error("manifest parse error at {location}: {reason}")]
    ManifestParse { location: String, reason: String },

    /// A frame referenced by a manifest could not be loaded.
    #[error("failed to ingest frame '{frame_id}': {reason}")]
    Ingest { frame_id: String, reason: String },

    /// Checkpoint directory is missing, malformed, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MumError {
    pub fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        MumError::Contract {
            op,
            reason: reason.into(),
        }
    }

    pub fn config(problems: Vec<String>) -> Self {
        MumError::Config { problems }
    }
}

pub type Result<T> = std::result::Result<T, MumError>;
