use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("zero vector")]
    ZeroVector,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("need at least {needed} identities, got {got}")]
    TooFewIdentities { needed: usize, got: usize },
    #[error("sinkhorn did not converge after {iters} iterations (marginal error {marginal_err:e})")]
    NotConverged { iters: usize, marginal_err: f64 },
    #[error("invalid distribution in column {0}")]
    InvalidDistribution(usize),
    #[error("batch of {batch} entries exceeds bank capacity {capacity}")]
    EntryTooLarge { batch: usize, capacity: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no query has a valid gallery match")]
    NoValidQueries,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
