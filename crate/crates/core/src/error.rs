use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("momentum not conserved: {0}")]
    Momentum(String),
    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("memory budget exceeded for {what}: needs {needed} bytes, budget {budget} bytes")]
    Budget {
        what: String,
        needed: u64,
        budget: u64,
    },
    #[error("non-finite amplitude at iteration {0}")]
    NonFinite(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
