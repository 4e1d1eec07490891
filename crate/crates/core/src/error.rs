use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("singular geometry: layer {layer} has zero noise but a nonzero perturbation")]
    SingularGeometry { layer: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("infeasible threshold regime: MN(1-zeta) = {lhs} <= t_alpha^2 zeta = {rhs}")]
    InfeasibleThreshold { lhs: f64, rhs: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },

    #[error("attack failed: {0}")]
    AttackFailure(String),

    #[error("degenerate audit: {0}")]
    DegenerateAudit(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
