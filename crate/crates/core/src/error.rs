use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a checkpoint file was rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointFault {
    /// The file ends before the declared payload and checksum.
    Truncated,
    /// The checksum does not match the content.
    Integrity,
    /// A known file with an unsupported format version.
    VersionMismatch,
    /// Not a checkpoint, or a header that does not describe the payload.
    Malformed,
}

impl std::fmt::Display for CheckpointFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CheckpointFault::Truncated => "truncated",
            CheckpointFault::Integrity => "integrity check failed",
            CheckpointFault::VersionMismatch => "version mismatch",
            CheckpointFault::Malformed => "malformed",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: String,
        left: Shape,
        right: Shape,
    },

    /// A broken internal contract. These are bugs, not user errors.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {kind}: {reason}")]
    Checkpoint {
        path: PathBuf,
        kind: CheckpointFault,
        reason: String,
    },

    #[error("non-finite loss at step {step} (batch samples {samples:?}): {detail}")]
    NonFinite {
        step: u64,
        samples: Vec<usize>,
        detail: String,
    },

    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &str, left: Shape, right: Shape) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            left,
            right,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, kind: CheckpointFault, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            kind,
            reason: reason.into(),
        }
    }

    /// Whether this error reports a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
