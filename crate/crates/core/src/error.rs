use thiserror::Error;

use crate::cox::{GammaFamily, JumpPath};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounds: need 0 < L < U, got L={lower}, U={upper}")]
    InvalidBounds { lower: f64, upper: f64 },

    #[error("invalid time grid: horizon={horizon}, n_steps={n_steps}")]
    InvalidGrid { horizon: f64, n_steps: usize },

    #[error("grid function has {got} values, grid has {expected} cells")]
    GridLength { expected: usize, got: usize },

    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("values outside [{lower}, {upper}] in {what}: saw {value}")]
    OutOfBounds {
        what: String,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("invalid jump distribution: {0}")]
    InvalidJumps(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid eta model: {0}")]
    InvalidEta(String),

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("path left the truncated lattice after {} jumps (state {exit_value})", .partial.len())]
    LatticeExit {
        partial: Box<JumpPath>,
        exit_value: f64,
    },

    #[error("insufficient mass at level/state {state}: no sample contributes before t={first_t}")]
    InsufficientMass { state: usize, first_t: f64 },

    #[error("fixed point did not converge for {scope} after {iterations} iterations (last residual {last_residual:.3e})")]
    NonConvergence {
        scope: String,
        iterations: usize,
        last_residual: f64,
        trace: Vec<f64>,
        best: Option<Box<GammaFamily>>,
    },

    #[error("word budget exceeded for state {state}: {words} words > cap {cap}")]
    WordBudget { state: usize, words: f64, cap: f64 },

    #[error("forward equation leaked {leak:.3e} mass by t={t} (tolerance {tolerance:.1e})")]
    MassLeak { t: f64, leak: f64, tolerance: f64 },

    #[error("insufficient data: need at least {needed}, have {have} ({what})")]
    InsufficientData {
        what: String,
        needed: usize,
        have: usize,
    },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("provenance mismatch for {artifact}: expected config hash {expected}, found {found}")]
    Provenance {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
