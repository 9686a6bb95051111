use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("operation requires a tabular emission, got {0}")]
    UnsupportedMode(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("infeasible marginals: source mass {source_mass}, target mass {target_mass}")]
    Infeasible { source_mass: f64, target_mass: f64 },

    #[error("projection matrix still singular after {0} draws")]
    SingularProjection(usize),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient data: need {needed} transitions, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("isolation violated at step {step}: non-metric gradient norm {norm:e} reached the metric encoder")]
    IsolationViolated { step: u64, norm: f64 },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
