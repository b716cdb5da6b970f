//! Crate-wide error type.

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (bad shape, bad
    /// configuration, empty input, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// A computation failed numerically (divergence, non-finite values,
    /// singular matrices beyond repair, ...).
    #[error("computation: {0}")]
    Computation(String),

    /// A file could not be read, written, or parsed.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Structured data (dataset, checkpoint, config) is malformed.
    #[error("format: {0}")]
    Format(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn computation(msg: impl Into<String>) -> Self {
        Error::Computation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
