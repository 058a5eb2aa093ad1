//! Error type shared by the engines.

use thiserror::Error;

/// Failures reported by the pricing and verification engines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("node outside the tree: {0}")]
    InvalidNode(String),

    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("penalty is not convex: {0}")]
    NotConvex(String),

    #[error("unsupported growth exponent {0}; powers above 2 are not allowed")]
    GrowthOutOfRange(f64),

    #[error("exhaustive tree with n = {n} exceeds the cap of {cap}")]
    NodeCapExceeded { n: usize, cap: usize },

    #[error("claim needs the full path; the lattice engine cannot price it")]
    PathDependentClaim,

    #[error("value surface unbounded below on the holdings grid")]
    Unbounded,

    #[error("measure leaves the finite domain of the conjugate penalty")]
    InfeasibleMeasure,

    #[error("transition probability {q} outside [0, 1] at depth {k}; increase n")]
    ProbabilityOutOfRange { q: f64, k: usize },

    #[error("control process violates its bounds: {0}")]
    KappaBounds(String),

    #[error("no scaled limit for this penalty: {0}")]
    UnsupportedLimit(String),

    #[error("empty grid")]
    EmptyGrid,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for well-posed requests the engines decline to run.
    pub fn is_refusal(&self) -> bool {
        matches!(
            self,
            Error::NodeCapExceeded { .. }
                | Error::PathDependentClaim
                | Error::Unbounded
                | Error::InfeasibleMeasure
                | Error::ProbabilityOutOfRange { .. }
                | Error::UnsupportedLimit(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
