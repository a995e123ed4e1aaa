use thiserror::Error;

/// Errors raised by the simulator, the controllers and the scenario harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("abscissa {x} outside of [0, {limit}]")]
    Domain { x: f64, limit: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("mass matrix is not positive definite (condition estimate {condition:e})")]
    SingularMass { condition: f64 },

    #[error("collocated map is near-singular (condition number {condition:e})")]
    Singular { condition: f64 },

    #[error("task is unreachable on the equilibrium manifold: {0}")]
    RankCollapse(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("simulation diverged at t = {time} s")]
    Divergence { time: f64 },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
