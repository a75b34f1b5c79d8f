//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed container (bad magic, unparseable header, truncated data).
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed container but an element type we do not handle.
    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    /// A named parameter is out of its allowed range.
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: &'static str, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Every pixel carries the ignore label, so there is nothing to supervise.
    #[error("empty supervision: all pixels are ignored")]
    EmptySupervision,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// An internal invariant was violated (e.g. a prototype lost unit norm).
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            field,
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::ShapeMismatch(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
