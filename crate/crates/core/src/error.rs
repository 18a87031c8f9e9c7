use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FqaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FqaError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate embedding: image has zero intensity variance")]
    DegenerateEmbedding,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("embedding not found for key {0}")]
    MissingEmbedding(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FqaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FqaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FqaError::InvalidInput(msg.into())
    }

    /// Process exit status for this error: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            FqaError::Config(_) => 2,
            FqaError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}
