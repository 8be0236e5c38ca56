//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular at t = {t}: {what}")]
    Singularity { t: f64, what: &'static str },

    #[error("degenerate reward split: {0}")]
    DegenerateSplit(&'static str),

    #[error("density vanished; ratio undefined at the queried point")]
    VanishingDensity,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("model produced non-finite output")]
    CorruptedModel,

    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate time grid: {0}")]
    Grid(String),

    #[error("transition kernel has zero variance; stochasticity must be > 0")]
    ZeroVariance,

    #[error("trajectory carries no stored noise; record with an SDE sampler")]
    MissingNoise,

    #[error("numerical guard tripped: {0}")]
    NumericalGuard(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
