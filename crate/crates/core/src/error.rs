use std::path::PathBuf;

use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors fed to `op` disagree on shape. Both shapes are spelled
    /// out so the caller can see which axis went wrong.
    #[error("{op}: shape mismatch, {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// An argument violates the operation's precondition.
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A configuration value (or combination) is rejected.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Binary/text input could not be decoded. `offset` is the byte
    /// position in the file at which decoding failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A gradient or loss became NaN/inf; `what` names the tensor.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// An internal consistency check failed. Seeing this is a bug.
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
