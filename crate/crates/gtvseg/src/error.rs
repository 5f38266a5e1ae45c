//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("header error in {path}: {msg}")]
    Header { path: PathBuf, msg: String },

    #[error("raw data length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch between operands")]
    GeometryMismatch,

    #[error("bounds violation: {0}")]
    Bounds(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("expected at least two lung components, found {0}")]
    LungComponents(usize),

    #[error("degenerate registration geometry: {0}")]
    DegenerateGeometry(String),

    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("too few cases: need at least {need}, got {got}")]
    TooFewCases { need: usize, got: usize },

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn header(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Header {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
