use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SqError>;

#[derive(Debug, Error)]
pub enum SqError {
    #[error("input contains NaN or infinite values")]
    NonFiniteInput,

    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty vector")]
    EmptyVector,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least 2 elements, got {0}")]
    TooShort(usize),

    #[error("granularity mismatch: {0}")]
    GranularityMismatch(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid salience profile: {0}")]
    InvalidProfile(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("container format error: {0}")]
    Container(String),

    #[error("artifact directory {} is locked by another invocation", .0.display())]
    Locked(PathBuf),

    #[error("I/O failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SqError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SqError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SqError::ShapeMismatch(msg.into())
    }
}
