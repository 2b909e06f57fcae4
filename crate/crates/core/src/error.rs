use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab. The variant decides the process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("index error: {0}")]
    Index(String),

    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tokenizer error: characters not in vocabulary: {0:?}")]
    Tokenizer(Vec<char>),

    #[error("empty utterance")]
    EmptyUtterance,

    #[error("data error: {0}")]
    Data(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 is success; config, data and numeric failures each get their own code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Data(_)
            | Error::Scoring(_)
            | Error::Report(_)
            | Error::Tokenizer(_)
            | Error::EmptyUtterance
            | Error::Checkpoint(_) => 3,
            Error::Numeric { .. } | Error::DegenerateLoss(_) => 4,
            Error::Shape(_) | Error::Index(_) | Error::Io { .. } => 1,
        }
    }
}
