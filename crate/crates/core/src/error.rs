use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest schema error: {0}")]
    Schema(String),
    #[error("file referenced by manifest does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sample {0} has an empty foreground")]
    EmptyForeground(String),
    #[error("bad RAIF magic")]
    BadMagic,
    #[error("unsupported RAIF version {0}")]
    VersionMismatch(u16),
    #[error("corrupt RAIF payload: {0}")]
    CorruptPayload(String),
    #[error("feature dimension {found} does not match index dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("feature vector {index} has norm {norm}, outside tolerance")]
    Normalization { index: usize, norm: f64 },
    #[error("zero vector in cosine similarity")]
    ZeroVector,
    #[error("content provider mismatch: index uses {index}, query uses {query}")]
    ProviderMismatch { index: String, query: String },
    #[error("guidance tokens misaligned: {0}")]
    GuidanceMisaligned(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
