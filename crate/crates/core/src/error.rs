use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{context} must be square, got {rows}x{cols}")]
    NotSquare {
        context: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("{0} did not converge")]
    Decomposition(&'static str),

    #[error("invalid inner problem: {0}")]
    InvalidProblem(String),

    #[error("{0} is numerically singular")]
    Singular(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invertibility threshold not reached within {0} iterations")]
    ThresholdNotReached(usize),

    #[error("{method} descent diverged at step {step} (residual {residual:e})")]
    Diverged {
        method: &'static str,
        step: usize,
        residual: f64,
    },

    #[error("{method} descent stopped after {steps} steps with residual {residual:e}")]
    NotConverged {
        method: &'static str,
        steps: usize,
        residual: f64,
    },

    #[error("hypothesis not satisfied: {0}")]
    Hypothesis(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

pub type Result<T> = core::result::Result<T, Error>;
