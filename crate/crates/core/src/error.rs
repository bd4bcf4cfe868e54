//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset handling, model IO, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv parse error at data row {row}, column \"{column}\": {message}")]
    CsvParse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("non-finite value at data row {row}, column \"{column}\"")]
    NonFinite { row: usize, column: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("teacher misaligned: {0}")]
    TeacherAlignment(String),

    #[error("non-finite gradient in tensor \"{tensor}\"")]
    NonFiniteGradient { tensor: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
