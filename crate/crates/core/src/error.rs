//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree on a dimension an operation requires to match.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single shape or axis is unusable for the operation.
    #[error("{op}: invalid dimension: {detail}")]
    InvalidDimension { op: &'static str, detail: String },

    /// A model / task / run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced or received a non-finite value.
    #[error("{op}: non-finite value encountered: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// The inputs make the requested quantity undefined
    /// (empty reduction, zero-variance similarity, empty dataset, ...).
    #[error("{op}: undefined result: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    /// Training aborted because the loss left the finite range.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

/// Failure modes of the binary checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint schema version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint payload truncated: {detail}")]
    Truncated { detail: String },

    #[error("parameter name mismatch: {detail}")]
    NameMismatch { detail: String },

    #[error("checkpoint stores {found} but this model expects {expected}")]
    DtypeMismatch { found: String, expected: String },

    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
