//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for a primitive; names the op and offending shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A precondition on an argument failed (bad range, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced NaN/Inf where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Optimization diverged; carries the epoch at which it was detected.
    #[error("divergence at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    /// File format violation (checkpoint container, sidecar, PNG constraints).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
