//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up for the requested operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A structural precondition failed (kernel parity, divisibility, ranges).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Model / training configuration is internally inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A serialized artifact (checkpoint, bitstream, video container) is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
