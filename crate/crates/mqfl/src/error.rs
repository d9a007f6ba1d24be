//! Crate-wide error type.

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A structural precondition was violated (index out of range, shape
    /// mismatch, malformed circuit, invalid argument).
    #[error("structural error: {0}")]
    Structural(String),

    /// A numeric value went non-finite; the message carries where.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file failed to parse; `offset` is the byte position of the failure.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// An experiment configuration failed validation; `field` names the
    /// offending entry.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: msg.into(),
        }
    }

    /// Tags an error with the sample index it surfaced on.
    pub fn with_sample(self, sample: usize) -> Self {
        self.with_context(&format!("sample {sample}"))
    }

    /// Prefixes structural/numeric messages with where they happened.
    pub fn with_context(self, context: &str) -> Self {
        match self {
            Error::Structural(m) => Error::Structural(format!("{context}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{context}: {m}")),
            other => other,
        }
    }

    /// True for errors a caller caused by handing in bad input rather than a
    /// failure at runtime. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Parse { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
