use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("mask has no observed entries")]
    EmptyMask,

    #[error("non-finite gradient in parameter tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid rating data: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("no ratings in {0}")]
    NoRatings(String),

    #[error("training stage `{stage}` failed: {source}")]
    Training {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a numerical failure with the name of the training stage that produced it.
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Training { .. } => e,
            e => Error::Training {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True when the error stems from non-finite values during optimization.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteGradient { .. } => true,
            Error::Training { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
