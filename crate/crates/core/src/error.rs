use thiserror::Error;

/// Errors surfaced by the identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("pseudo-inertia is not positive definite: {0}")]
    InfeasibleInertia(String),

    #[error("cone solver hit {iterations} iterations with KKT residual {residual:.3e}")]
    MaxIterations { iterations: usize, residual: f64 },

    #[error("inner solve did not converge (KKT residual {residual:.3e})")]
    NotConverged { residual: f64 },

    #[error("mass matrix is not positive definite")]
    SingularMassMatrix,

    #[error("rollout failed at step {step}: {source}")]
    Rollout {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("could not generate a contact event after {0} attempts")]
    ResampleCap(usize),

    #[error("finite-difference parameter count {count} exceeds cap {cap}")]
    ParameterCap { count: usize, cap: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
