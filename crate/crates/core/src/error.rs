use thiserror::Error;

/// Errors produced by the feature, numeric, and generation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("rank table has no entry for block {block}, scale {scale}, alpha {alpha}")]
    MissingRankEntry { block: usize, scale: usize, alpha: f64 },

    #[error("output cache is empty at refinement scale {0}")]
    MissingCache(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures caused by the numbers rather than the arguments.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NumericFailure(_) | Error::Degenerate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
