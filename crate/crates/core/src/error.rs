//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("component count mismatch: expected {expected}, got {got}")]
    ComponentMismatch { expected: usize, got: usize },

    #[error("grids do not match between operands")]
    GridMismatch,

    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),

    #[error("eigen-solver failure at wavevector {xi:?}: {detail}")]
    EigenFailure { xi: [f64; 3], detail: String },

    #[error("numerical divergence detected, last valid time t = {last_valid_t}")]
    Diverged { last_valid_t: f64 },

    #[error("grid too small for requested data: need at least n = {required_n} points per axis")]
    GridTooSmall { required_n: usize },

    #[error("missing companion state: {0}")]
    MissingCompanion(&'static str),

    #[error("timestamp mismatch between coupled states: {0} vs {1}")]
    TimestampMismatch(f64, f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
