use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {operand}: expected {expected}, got {actual}")]
    Dimension {
        operand: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    #[error("non-finite value during evaluation: {0}")]
    Evaluation(String),

    #[error("cannot corrupt triple: need at least 2 entities, have {0}")]
    CannotCorrupt(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("episode construction error: {0}")]
    EpisodeConstruction(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("episode {index}: {source}")]
    AtEpisode {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(operand: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            operand,
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Strips episode wrappers to reach the underlying cause.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtEpisode { source, .. } => source.root(),
            other => other,
        }
    }
}
