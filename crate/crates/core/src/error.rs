use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index error: id {id} out of range [0, {bound})")]
    Index { id: usize, bound: usize },

    #[error("config error: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Malformed files: checkpoints, dataset JSONL, embedding text files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected ATTNET01")]
    BadMagic,

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("invalid manifest json: {0}")]
    Manifest(String),

    #[error("parse error at line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
