//! Error type shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum HipError {
    /// Operand shapes do not conform for a numeric primitive.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Caller-supplied data violates a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A model or run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value left the finite range (NaN/Inf where finiteness is required).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was invoked in a state that does not support it.
    #[error("state error: {0}")]
    State(String),

    /// A dataset record failed schema validation.
    #[error("schema violation at record {record}, field `{field}`: {detail}")]
    Schema {
        record: usize,
        field: String,
        detail: String,
    },

    /// A checkpoint file is malformed or has an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HipError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HipError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HipError>;
