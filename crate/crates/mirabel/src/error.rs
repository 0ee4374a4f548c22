use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by the process exit-code contract used by the CLI:
/// 1 for i/o and format problems, 2 for network problems, 3 for violated
/// preconditions. See [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("line {line}: duplicate document id `{id}`")]
    DuplicateId { line: usize, id: String },

    #[error("embedding dim must be a power of two >= 64, got {dim}")]
    BadDim { dim: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("embedding data length {len} does not match {count} x {dim}")]
    BadDataLength { len: usize, count: usize, dim: usize },

    #[error("non-finite value in embedding data")]
    NonFiniteEmbedding,

    #[error("bad magic bytes in embedding file")]
    BadMagic,

    #[error("unsupported embedding file version {0}")]
    BadVersion(u16),

    #[error("embedding file truncated: expected {expected} data bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("embedding service returned {got} vectors for {sent} texts")]
    VectorCountMismatch { sent: usize, got: usize },

    #[error("embedding service failed after {attempts} attempts: {reason}")]
    Network { attempts: usize, reason: String },

    #[error("embedding service returned HTTP status {status}")]
    HttpStatus { status: u16 },

    #[error("corpus has {n} documents; detection requires at least {min}")]
    CorpusTooSmall { n: usize, min: usize },

    #[error("store is empty")]
    EmptyStore,

    #[error("non-finite similarity score at row {row}")]
    NonFiniteScore { row: usize },

    #[error("significance level must be in (0, 1), got {0}")]
    InvalidRho(f64),

    #[error("sample too small: need at least {min} values, got {n}")]
    SampleTooSmall { n: usize, min: usize },

    #[error("sample has zero variance")]
    ZeroVariance,

    #[error("empty sample")]
    EmptySample,

    #[error("reference set must contain both classes")]
    SingleClass,

    #[error("document `{0}` not found in store")]
    UnknownDocument(String),

    #[error("document has {n} tokens; attack queries require at least {min}")]
    DocumentTooShort { n: usize, min: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable CLI exit-code contract: 1 i/o or format, 2 network,
    /// 3 precondition violation.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Io { .. } | MalformedLine { .. } | DuplicateId { .. } | BadMagic | BadVersion(_)
            | Truncated { .. } | BadDataLength { .. } | NonFiniteEmbedding => 1,
            Network { .. } | HttpStatus { .. } | VectorCountMismatch { .. } => 2,
            _ => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
