use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error("checksum mismatch for {what}: manifest {expected:016x}, data {actual:016x}")]
    ChecksumMismatch {
        what: String,
        expected: u64,
        actual: u64,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("output directory {0} is not empty (pass overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),

    #[error("unknown sample id {0}")]
    UnknownSample(u64),

    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("result grids do not match: {0}")]
    MismatchedGrid(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
