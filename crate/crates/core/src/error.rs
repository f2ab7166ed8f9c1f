use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("zero vector where a nonzero vector is required")]
    ZeroVector,

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate semantic basis: {0}")]
    DegenerateBasis(String),

    #[error("vocabulary mismatch: teacher has {teacher} atoms, student has {student}")]
    VocabMismatch { teacher: usize, student: usize },

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenRangeError { token: usize, vocab_size: usize },

    #[error("supervised mask selects no positions")]
    EmptyMask,

    #[error("numerical error: {0}")]
    NumericalError(String),

    #[error("value out of range: {0}")]
    RangeError(String),

    #[error("sample misalignment: {0}")]
    AlignmentError(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeError(msg.into())
    }
}
