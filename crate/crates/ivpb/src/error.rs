use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("time derivative of order {order} needs history depth or a substitution context")]
    MissingTimeContext { order: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("newton did not converge in {} iterations, residual history {residuals:?}", residuals.len().saturating_sub(1))]
    NewtonDiverged { residuals: Vec<f64> },
    #[error("exp(phi) overflow (max phi {max_phi:e})")]
    Overflow { max_phi: f64 },
    #[error("energy balancing did not converge after {iterations} secant iterations (residual {residual:e})")]
    SecantFailed { iterations: usize, residual: f64 },
    #[error("negative initial distribution F0 = {value:e} at x-node {x}, v-node {v}")]
    NegativeInitial { x: usize, v: usize, value: f64 },
    #[error("non-finite value detected at step {step}")]
    NonFinite { step: usize },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
