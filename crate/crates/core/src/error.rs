use thiserror::Error;

/// Errors raised by model construction, evaluation and the solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DrgpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid model data: {0}")]
    InvalidModel(String),

    #[error("negative radicand {value:e} in block {block}: covariance is not PSD")]
    NegativeRadicand { block: usize, value: f64 },

    #[error("builder {builder} does not accept {kind} / {coupling} instances")]
    WrongFormulation {
        builder: &'static str,
        kind: String,
        coupling: String,
    },

    #[error("program is {0}, operation requires the other convexity class")]
    Convexity(&'static str),

    #[error("non-finite vector field at t = {time}: state {state:?}")]
    NonFiniteState { time: f64, state: Vec<f64> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, DrgpError>;

impl From<std::io::Error> for DrgpError {
    fn from(e: std::io::Error) -> Self {
        DrgpError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for DrgpError {
    fn from(e: serde_json::Error) -> Self {
        DrgpError::Parse(e.to_string())
    }
}

pub(crate) fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(DrgpError::Dimension {
            context: context.to_string(),
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(context: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DrgpError::NonFinite {
            context: context.to_string(),
        })
    }
}
