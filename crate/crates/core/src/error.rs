use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("simulation aborted on path {path}, step {step}: {reason}")]
    Simulation {
        path: usize,
        step: usize,
        reason: String,
    },

    #[error("singular regression at knot {knot} (condition number {cond:e})")]
    SingularRegression { knot: usize, cond: f64 },

    #[error("quadrature failure at node {node:?}: {reason}")]
    Quadrature { node: Vec<f64>, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite cost accumulated on path {path}")]
    NonFiniteCost { path: usize },

    #[error("density ratio undefined: {0}")]
    DensityRatio(String),
}

pub type Result<T> = std::result::Result<T, Error>;
