use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("region contains no lattice nodes (under-resolved): {0}")]
    EmptyRegion(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("negative value {value} at node {node}; the class requires u >= 0")]
    NegativeValue { node: usize, value: f64 },

    #[error("unresolved scale: {0}")]
    Unresolved(String),

    #[error("hypothesis not satisfied: {0}")]
    Hypothesis(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
