use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("embedding `{id}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("embedding `{id}` has a non-finite value at index {index}")]
    NonFinite { id: String, index: usize },

    #[error("embedding `{id}` has zero norm")]
    ZeroNorm { id: String },

    #[error("missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error("duplicate ids requested: {}", .0.join(", "))]
    DuplicateRequest(Vec<String>),

    #[error("query id sets differ; symmetric difference: {}", .0.join(", "))]
    QuerySetMismatch(Vec<String>),

    #[error("gold document is not in the candidate pool of query `{query_id}`")]
    GoldAbsent { query_id: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
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

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }
}
