use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("empty caption")]
    EmptyCaption,

    #[error("no embedding found for id {0:?}")]
    MissingEmbedding(String),

    #[error("no prediction found for id {0:?}")]
    MissingPrediction(String),

    #[error("ground truth has no foreground anywhere in the dataset")]
    DegenerateGroundTruth,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("decode error in {path}: {message}")]
    Decode { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that mean "the input data or flags are bad", as
    /// opposed to a runtime failure. The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Manifest { .. }
                | Error::DuplicateId(_)
                | Error::EmptyCaption
                | Error::MissingEmbedding(_)
                | Error::MissingPrediction(_)
                | Error::DegenerateGroundTruth
                | Error::Parse(_)
                | Error::Decode { .. }
                | Error::Usage(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
