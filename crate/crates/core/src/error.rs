use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sampling rate must be positive and at least {min:e}, got {beta}")]
    InvalidBeta { beta: f64, min: f64 },

    #[error("model-free transform anchored at beta={anchored} queried at beta={requested}")]
    UnanchoredBeta { requested: f64, anchored: f64 },

    #[error("service law cannot be sampled: {0}")]
    NotSampleable(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("ill-conditioned system (condition number {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("not enough observations: got {got}, need at least {need}")]
    InsufficientData { got: usize, need: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
