use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar argument is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Model or pipeline configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Input data is missing, empty or malformed.
    #[error("data error: {0}")]
    Data(String),

    #[error("unknown class {0:?}")]
    Vocabulary(String),

    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    /// Produced content failed validation; the raw payload is kept for inspection.
    #[error("validation error: {msg}")]
    Validation { msg: String, raw: String },

    /// Remote endpoint failed (transport, timeout or malformed payload).
    #[error("endpoint error after {attempts} attempt(s): {msg}")]
    Endpoint {
        msg: String,
        raw: Option<String>,
        attempts: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("k-means needs {k} distinct points but only {distinct} exist; reduce k")]
    ReduceK { k: usize, distinct: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    /// Whether a retry of the same request could succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Endpoint { .. })
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
