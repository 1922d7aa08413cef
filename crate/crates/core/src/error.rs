use thiserror::Error;

use crate::dynamics::PdRun;

/// Errors raised by the numerical and modelling layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular matrix: pivot {pivot:.3e} below threshold {threshold:.3e}")]
    SingularMatrix { pivot: f64, threshold: f64 },

    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("backward Riccati integration diverged at t = {time}: |Phi| exceeded {bound:.1e}")]
    StepSizeTooLarge { time: f64, bound: f64 },

    #[error("eigenvalue iteration failed to converge")]
    EigenFailure,

    #[error("invalid incidence matrix: {0}")]
    InvalidIncidence(String),

    #[error("invalid cost parameters: {0}")]
    InvalidCosts(String),

    #[error("invalid demand vector: {0}")]
    InvalidDemand(String),

    #[error("deterministic QP is infeasible for the given demand")]
    Infeasible,

    #[error("active-set enumeration refused: {edges} edges exceeds the limit of {limit}")]
    EnumerationGuard { edges: usize, limit: usize },

    #[error("heuristic point not comparable with the oracle: {0}")]
    NotComparable(String),

    #[error("primal-dual run hit max_steps without reaching the stop tolerance")]
    MaxStepsExceeded(Box<PdRun>),

    #[error("state diverged: |x|_inf = {norm:.3e} at step {step}")]
    Diverged { step: usize, norm: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("agent {agent}: {source}")]
    Agent {
        agent: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Short stable name of the variant, used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::SingularMatrix { .. } => "SingularMatrix",
            Error::NoStabilizingSolution(_) => "NoStabilizingSolution",
            Error::NotConverged { .. } => "NotConverged",
            Error::StepSizeTooLarge { .. } => "StepSizeTooLarge",
            Error::EigenFailure => "EigenFailure",
            Error::InvalidIncidence(_) => "InvalidIncidence",
            Error::InvalidCosts(_) => "InvalidCosts",
            Error::InvalidDemand(_) => "InvalidDemand",
            Error::Infeasible => "Infeasible",
            Error::EnumerationGuard { .. } => "EnumerationGuard",
            Error::NotComparable(_) => "NotComparable",
            Error::MaxStepsExceeded(_) => "MaxStepsExceeded",
            Error::Diverged { .. } => "Diverged",
            Error::InvalidParams(_) => "InvalidParams",
            Error::Agent { source, .. } => source.kind(),
        }
    }

    /// True for errors caused by malformed model input rather than numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidIncidence(_)
            | Error::InvalidCosts(_)
            | Error::InvalidDemand(_)
            | Error::InvalidParams(_)
            | Error::DimensionMismatch(_)
            | Error::EnumerationGuard { .. } => true,
            Error::Agent { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
