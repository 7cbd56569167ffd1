use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid history: {0}")]
    InvalidHistory(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("path {path} diverged at step {step} (|X| = {value:e})")]
    Divergence { path: usize, step: usize, value: f64 },

    #[error("gamma reached zero on path {path} at step {step}")]
    GammaCollapse { path: usize, step: usize },

    #[error("oracle inapplicable: {0}")]
    Inapplicable(String),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("point outside grid interior: {0}")]
    Boundary(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
