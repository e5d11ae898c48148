use thiserror::Error;

/// Errors produced by the modelling, index, scheduling and bound routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("model assumption violated: {0}")]
    Assumption(String),

    #[error("riccati iteration did not converge in {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("stability condition violated: alpha*(1-p) = {product} >= 1")]
    Unstable { product: f64 },

    #[error("numerical oracle failed: {0}")]
    Oracle(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("upper bound does not exist: {0}")]
    NoBound(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("state space of {states} states exceeds the budget of {budget}")]
    Resource { states: usize, budget: usize },

    #[error("plant generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
