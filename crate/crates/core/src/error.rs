//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or kernel shapes do not line up.
    #[error("shape mismatch in {context}: {detail}")]
    Shape {
        context: &'static str,
        detail: String,
    },

    /// A validity mask or switch input contained a value other than 0 or 1.
    #[error("non-binary mask value {value} at flat index {index}")]
    NonBinaryMask { value: f64, index: usize },

    /// Invalid argument or configuration value.
    #[error("{0}")]
    Invalid(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Ground-truth mask was empty: nothing to supervise or evaluate.
    #[error("no supervised pixels: ground-truth mask is all zero")]
    NoSupervision,

    /// Key=value run configuration parse failure.
    #[error("config error at line {line} ({field}): {message}")]
    Config {
        line: usize,
        field: String,
        message: String,
    },

    /// Checkpoint container decode failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("png error in {path}: {message}")]
    Png { path: String, message: String },
}

impl Error {
    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            context,
            detail: detail.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn png(path: impl Into<String>, message: impl ToString) -> Self {
        Error::Png {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
