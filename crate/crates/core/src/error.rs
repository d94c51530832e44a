use std::io;

use thiserror::Error;

pub type Result<T, E = ExcapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ExcapError {
    /// Malformed input file; `location` names the row/column or sequence.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A value violates a documented invariant of a data type.
    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite or exploding values during training or generation.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    /// A metric or statistic is undefined for the given input.
    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExcapError {
    pub(crate) fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Self::Config(message.into())
    }

    pub(crate) fn dim(message: impl Into<String>) -> Self {
        Self::Dimension(message.into())
    }
}
