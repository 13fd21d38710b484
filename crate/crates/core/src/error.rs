use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular point: {0}")]
    Singularity(String),

    #[error("reference flow hit a singularity at sub-step {substep}: {message}")]
    FlowSingularity { substep: usize, message: String },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last update {residual:e})")]
    Divergence { iterations: usize, residual: f64 },

    #[error("step {step} failed: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss contribution from data pair {pair}")]
    NonFiniteLoss { pair: usize },

    #[error("training diverged at iteration {iteration} (last finite loss {last_finite_loss:e})")]
    TrainingDiverged {
        iteration: usize,
        last_finite_loss: f64,
        /// Parameters after the last iteration that produced a finite loss.
        checkpoint: Vec<f64>,
    },

    #[error("precision floor: {0}")]
    Precision(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_step(step: usize, source: Error) -> Self {
        Error::AtStep {
            step,
            source: Box::new(source),
        }
    }
}
