use std::path::PathBuf;

/// Errors produced anywhere in the matching engine.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A configuration value is out of its valid range.
    #[error("config error: {0}")]
    Config(String),
    /// A binary file could not be parsed.
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// A binary file ended before its declared payload.
    #[error("truncated file at offset {offset}: expected {expected} more bytes, found {found}")]
    Truncated {
        offset: u64,
        expected: u64,
        found: u64,
    },
    /// The correspondence set does not determine a unique model.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    /// Too few samples for the requested estimator.
    #[error("insufficient data: need at least {required}, got {got}")]
    InsufficientData { required: usize, got: usize },
    /// No decomposition candidate wins the cheirality vote.
    #[error("ambiguous essential decomposition: {0}")]
    AmbiguousDecomposition(String),
    /// A statistic was requested over an empty or invalid input.
    #[error("undefined input: {0}")]
    UndefinedInput(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
