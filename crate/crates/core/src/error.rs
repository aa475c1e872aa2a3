//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown builtin system `{name}`; valid names: {valid}")]
    UnknownBuiltin { name: String, valid: String },

    #[error("simulation produced a nonfinite state at step {step}")]
    SimulationBlowup { step: usize },

    #[error(
        "power iteration did not converge within {iters} iterations \
         (residual {residual:.3e}, tol {tol:.3e})"
    )]
    EigenNoConvergence { iters: usize, residual: f64, tol: f64 },

    #[error("eigensolver failed at surface node beta = {node:?}: {source}")]
    SurfaceNode {
        node: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("infeasible path: segment {segment} slope {slope:?} has infinite local rate")]
    InfeasibleSegment { segment: usize, slope: Vec<f64> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
