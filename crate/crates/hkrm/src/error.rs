//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not chain. Carries both shapes so the caller can
    /// see exactly what was passed where.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    /// Malformed input data (annotation records, fixture files).
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A configuration value failed validation. `key` is the dotted path of
    /// the offending field.
    #[error("invalid config value for `{key}`: {message}")]
    Config { key: String, message: String },

    /// Input is outside the mathematical domain of an operation
    /// (empty distribution, all-empty table, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced NaN/Inf or otherwise left the finite range.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A serialized artifact is unreadable: bad magic, version mismatch,
    /// truncation.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
