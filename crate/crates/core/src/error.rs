use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("sample rate mismatch: file is {found} Hz, expected {expected} Hz (no resampler configured)")]
    Rate { found: u32, expected: u32 },

    #[error("manifest error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: file is corrupt or truncated")]
    Checksum,

    #[error("missing embedding for clip `{0}`")]
    MissingEmbedding(String),

    #[error("missing class statistics: {0}")]
    MissingStats(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint is untrained (epoch counter is 0)")]
    Untrained,

    #[error("degenerate regressor: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short identifier for machine-readable error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Rate { .. } => "rate",
            Error::Manifest { .. } => "manifest",
            Error::Stats(_) => "stats",
            Error::Dimension { .. } => "dimension",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Version { .. } => "version",
            Error::Checksum => "checksum",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::MissingStats(_) => "missing_stats",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Untrained => "untrained",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
        }
    }
}
