use thiserror::Error;

/// Errors raised across the lab.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {t} outside [0, {t_end}]")]
    TimeOutOfDomain { t: f64, t_end: f64 },

    #[error("singular schedule: g vanishes at t = {t}")]
    SingularSchedule { t: f64 },

    #[error("singular transition kernel at t = {t} (conditional std is zero)")]
    SingularKernel { t: f64 },

    #[error("quadrature did not converge: achieved {achieved:e}, requested {requested:e}")]
    QuadratureNonConvergence { achieved: f64, requested: f64 },

    #[error("sampler diverged (non-finite state) at step {step}")]
    Divergence { step: usize },

    #[error("time step {dt:e} too large for this problem; use dt <= {suggested:e}")]
    UnstableStep { dt: f64, suggested: f64 },

    #[error("domain too small: boundary mass {mass:e} exceeds {limit:e}")]
    DomainTooSmall { mass: f64, limit: f64 },

    #[error("unreliable quadrature: truncated tail carries {fraction:.3e} of the integral")]
    UnreliableQuadrature { fraction: f64 },

    #[error("training diverged (non-finite loss) at step {step}")]
    TrainingDiverged { step: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> LabError {
    LabError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
