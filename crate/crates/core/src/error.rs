use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: grid has N = {grid}, parameters have N = {params}")]
    DimensionMismatch { grid: usize, params: usize },

    #[error("grid mismatch between density and kernel table")]
    GridMismatch,

    #[error("density is identically zero")]
    ZeroDensity,

    #[error("Euler-Lagrange step rejected: D(r) = {value:e} <= 0 at node {node}")]
    NonPositiveMultiplier { node: usize, value: f64 },

    #[error("stationary base mu + W*rho = {value:e} <= 0 at node {node}")]
    NonPositiveBase { node: usize, value: f64 },

    #[error("time step underflow at t = {t:e} (dt = {dt:e})")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("no restart converged (best residual {best_residual:e})")]
    NotConverged { best_residual: f64 },

    #[error("kernel table cache is invalid: {0}")]
    InvalidCache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
