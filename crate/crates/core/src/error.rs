use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate query id {0:?}")]
    DuplicateId(String),

    #[error("invalid query {id:?}: {reason}")]
    InvalidQuery { id: String, reason: String },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("unknown query {0:?}")]
    UnknownQuery(String),

    #[error("unknown path {path_id} for query {query_id:?}")]
    UnknownPath { query_id: String, path_id: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible environment spec: {0}")]
    Infeasible(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("scoring failed: {0}")]
    Scoring(String),

    #[error("unsupported in this mode: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
