use thiserror::Error;

pub type Result<T, E = L2dError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum L2dError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("context overflow: {needed} positions requested, model supports {max}")]
    ContextOverflow { needed: usize, max: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("timestep {0} outside [0, 1]")]
    Timestep(f64),

    #[error("velocity singularity: t = {0} is within the guard band of t = 1")]
    Singularity(f64),

    #[error("degenerate vocabulary projection for token {token} (norm {norm:e})")]
    DegenerateProjection { token: usize, norm: f64 },

    #[error("adaptive step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("missing cache positions: target {target} needs {needed} cached positions, cache holds {available}")]
    MissingCache {
        target: usize,
        needed: usize,
        available: usize,
    },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
