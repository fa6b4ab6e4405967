use thiserror::Error;

/// Errors raised by the harvester model and its evaluators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Domain { field: &'static str, reason: String },

    #[error("infeasible gains (K_m = {km}, K_e = {ke}): require K_m > 0 and K_e > -1")]
    InfeasibleGains { km: f64, ke: f64 },

    #[error("system matrix is not Hurwitz (max eigenvalue real part = {margin:e})")]
    Unstable { margin: f64 },

    #[error("linear solve is numerically singular (pivot ratio {pivot_ratio:e})")]
    SingularSolve { pivot_ratio: f64 },

    #[error("numeric failure in {context}")]
    Numeric { context: &'static str },

    #[error("quadrature tolerance not met after {intervals} subintervals: error {error:e} > target {target:e}")]
    ToleranceNotMet { intervals: usize, error: f64, target: f64 },

    #[error("transfer function denominator vanishes at omega = {omega}")]
    PoleOnGrid { omega: f64 },

    #[error("trajectory too short: {available} samples retained, at least {required} needed")]
    TooShort { available: usize, required: usize },

    #[error("model/gains mismatch: {0}")]
    Mismatch(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Domain {
        field,
        reason: reason.into(),
    }
}
