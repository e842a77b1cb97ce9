use thiserror::Error;

/// Errors raised by the library.
///
/// Variants group into three families that the CLI maps onto exit codes:
/// invalid configuration or arguments, malformed data, and numerical failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("infeasible coupling: row-marginal violation {violation:e} exceeds {tolerance:e}")]
    InfeasibleCoupling { violation: f64, tolerance: f64 },

    #[error("domain violation in {context}: {reason}")]
    Domain {
        context: &'static str,
        reason: String,
    },

    #[error("entropic affinity bisection did not converge (worst row {row}, entropy gap {gap:e})")]
    BisectionFailed { row: usize, gap: f64 },

    #[error("degenerate kernel in {0}: centered kernel is zero")]
    DegenerateKernel(&'static str),

    #[error("factorization failed in {context} after jitter {jitter:e}")]
    Factorization { context: &'static str, jitter: f64 },

    #[error("k-means produced an empty cluster after {restarts} restarts")]
    EmptyCluster { restarts: usize },

    #[error("non-finite objective after {step}")]
    NonFiniteObjective { step: &'static str },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error families, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter { .. } | Error::DimensionMismatch { .. } => ErrorKind::Usage,
            Error::NonFinite(_)
            | Error::InfeasibleCoupling { .. }
            | Error::Domain { .. }
            | Error::Data(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::Data,
            Error::BisectionFailed { .. }
            | Error::DegenerateKernel(_)
            | Error::Factorization { .. }
            | Error::EmptyCluster { .. }
            | Error::NonFiniteObjective { .. } => ErrorKind::Numerical,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
