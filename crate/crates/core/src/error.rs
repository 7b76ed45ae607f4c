use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"NUQ1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: u64 },

    #[error("id file lists {found} ids but the matrix has {expected} rows")]
    IdCountMismatch { expected: usize, found: usize },

    #[error("duplicate item id {0:?}")]
    DuplicateId(String),

    #[error("malformed id line {line}: {reason}")]
    BadIdLine { line: usize, reason: String },

    #[error("embedding set must contain at least one item")]
    EmptySet,

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("input contains NaN")]
    NanInput,

    #[error("empty input")]
    EmptyInput,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("value {value} outside [0, 1]")]
    Domain { value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need at least {needed} points, got {available}")]
    NotEnoughPoints { needed: usize, available: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("missing side information: {0}")]
    MissingSideInfo(String),

    #[error("forward cache does not match this network: {0}")]
    CacheMismatch(String),

    #[error("level {level} out of range for {levels}-level semantic ids")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("code {code} out of range for codebook of size {n_codes}")]
    CodeOutOfRange { code: usize, n_codes: usize },

    #[error("semantic id length mismatch: {0} vs {1} levels")]
    LevelMismatch(usize, usize),

    #[error("k = {k} out of range for {count} items")]
    KOutOfRange { k: usize, count: usize },

    #[error("model format: {0}")]
    Model(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }

    /// True for failures caused by caller-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
