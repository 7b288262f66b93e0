use thiserror::Error;

/// Errors produced by the localization library.
#[derive(Debug, Error)]
pub enum Error {
    /// A text or binary file could not be parsed. `line` is 1-based; binary
    /// formats report 0.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A model refers to something that does not exist, or violates one of
    /// its structural invariants.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Geometrically or numerically degenerate data (collinear points,
    /// antipodal descriptors, rank-deficient systems).
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
