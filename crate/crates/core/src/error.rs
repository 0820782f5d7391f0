use std::fmt;

use thiserror::Error;

/// A point `(t, y, x)` at which a check or evaluation failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub t: f64,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} y={:?} x={:?}", self.t, self.y, self.x)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("hypothesis violation ({what}) at {witness}: value {value}")]
    HypothesisViolation {
        what: &'static str,
        value: f64,
        witness: Witness,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ODE integration failed after t={last_good_time}")]
    IntegrationFailure { last_good_time: f64 },

    #[error("simulation blow-up at step {step} (particle {particle})")]
    BlowUp { step: usize, particle: usize },

    #[error("integrability violation: {0}")]
    IntegrabilityViolation(String),

    #[error("precondition failed: {predicate}")]
    Precondition { predicate: String },

    #[error("degenerate density family: {0}")]
    DegenerateFamily(String),

    #[error("no positive t0 reaches the target contraction rate: {0}")]
    ConstantTooLarge(String),

    #[error("insufficient signal: {0}")]
    InsufficientSignal(String),

    #[error("Picard iteration on interval {interval} is not contracting (deltas {deltas:?})")]
    NonContraction { interval: usize, deltas: Vec<f64> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
