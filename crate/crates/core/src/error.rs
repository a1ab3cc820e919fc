use thiserror::Error;

use crate::sde_solver::PicardOutcome;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// Only equal-mass empirical measures with equal atom counts are compared.
    #[error("atom counts differ: {left} vs {right}")]
    AtomCountMismatch { left: usize, right: usize },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("time grids differ: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("drift `{drift}` returned a non-finite value at t={t}, y={y:?}")]
    NonFiniteDrift { drift: String, t: f64, y: Vec<f64> },

    #[error("state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("drift `{0}` declares no uniform bound; mollification requires a bounded drift")]
    UnboundedDrift(String),

    #[error("Picard iteration did not reach tolerance after {} iterations (last distance {})",
        trace.len(), trace.last().copied().unwrap_or(f64::NAN))]
    PicardNotConverged {
        trace: Vec<f64>,
        outcome: Box<PicardOutcome>,
    },

    #[error("estimator hypotheses not met: {0}")]
    HypothesisViolation(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
