use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("martingale property fails at node {node} (drift {drift:e})")]
    NotMartingale { node: usize, drift: f64 },
    #[error("stopping time never fires on the path to leaf node {leaf}")]
    NeverStops { leaf: usize },
    #[error("exponent p = {0} outside [1, inf)")]
    InvalidExponent(f64),
    #[error("process must be strictly positive, node/path {index} holds {value}")]
    NonPositive { index: usize, value: f64 },
    #[error("cannot slice at eps = {eps}: node {node} has one-step bracket {step} > eps^2 (minimal feasible eps {min_eps})")]
    SliceImpossible { eps: f64, node: usize, step: f64, min_eps: f64 },
    #[error("singular one-step factor at node {node}")]
    Singular { node: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing channel '{0}'")]
    MissingChannel(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
