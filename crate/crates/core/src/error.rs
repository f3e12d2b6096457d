use thiserror::Error;

/// Every failure the library can report.
///
/// Variants map one-to-one onto the error codes printed by the command-line
/// front end, see [`Error::code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("slice out of range: {what} requested {requested}, limit {limit}")]
    Slice {
        what: &'static str,
        requested: usize,
        limit: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable prefix for this error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "E_DIMENSION",
            Error::Slice { .. } => "E_SLICE",
            Error::Config(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Index { .. } => "E_INDEX",
            Error::Parse { .. } => "E_PARSE",
            Error::Usage(_) => "E_USAGE",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
