use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("duplicate id {id:?} in {path}")]
    DuplicateId { path: PathBuf, id: String },

    #[error("answer ids not present in data: {0:?}")]
    UnknownAnswerIds(Vec<String>),

    #[error("ids without an answer: {0:?}")]
    MissingAnswers(Vec<String>),

    #[error("id mismatch between predictions and gold: {0:?}")]
    IdMismatch(Vec<String>),

    #[error("token sequence: {0}")]
    Sequence(String),

    #[error("backend: {0}")]
    Backend(String),

    #[error("generation failed after {partial:?}: {source}")]
    Generation {
        partial: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training: {0}")]
    Training(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
