use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GroveError>;

#[derive(Debug, Error)]
pub enum GroveError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("top-k out of range: k={k} must satisfy 1 <= k <= n={n}")]
    TopKOutOfRange { k: usize, n: usize },

    /// A configuration field violates one of the layer constraints.
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("adjugate eval count {count} outside [{min}, {max}]")]
    AdjugateCountOutOfBound {
        count: usize,
        min: usize,
        max: usize,
    },

    #[error("bad magic: checkpoint does not start with GROVEMOE1")]
    BadMagic,

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("checkpoint holds a {found} layer, expected {expected}")]
    WrongLayerKind {
        expected: &'static str,
        found: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GroveError {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        GroveError::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(op: &'static str, expected: usize, got: usize) -> Self {
        GroveError::DimensionMismatch { op, expected, got }
    }
}
