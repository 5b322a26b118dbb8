use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// NaN/Inf surfaced where finite values are required, with enough
    /// context to point at the first offending location.
    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("communication failure at rank {rank}: {reason}")]
    Comm { rank: usize, reason: String },

    #[error("collective timed out at rank {rank} after {ms} ms")]
    Timeout { rank: usize, ms: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("cost-model fit needs at least 3 distinct worker counts, got {0}")]
    InsufficientFit(usize),

    #[error("training step failed: {0}")]
    Step(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
