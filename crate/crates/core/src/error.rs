use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

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
