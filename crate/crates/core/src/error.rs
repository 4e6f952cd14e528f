//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the numeric core and its file interfaces.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An operation received operands whose shapes do not conform.
    #[error("shape mismatch in `{op}`: left {lhs:?} vs right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation received an argument outside its domain.
    #[error("invalid argument to `{op}`: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// `backward` was called on a non-scalar tensor.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// The optimizer stepped a parameter without a populated gradient.
    #[error("parameter {index} has no gradient; run backward first")]
    MissingGradient { index: usize },

    /// A prompt was not present in a file-backed embedding table.
    #[error("embedding file has no entry for prompt {prompt:?}")]
    MissingPrompt { prompt: String },

    /// Mismatched image ids between paired datasets.
    #[error("dataset id mismatch: {msg}")]
    IdMismatch { msg: String },

    /// File or serialization failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed persisted artifact.
    #[error("failed to parse {path}: {msg}")]
    Parse { path: String, msg: String },
}

impl CoreError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        CoreError::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
