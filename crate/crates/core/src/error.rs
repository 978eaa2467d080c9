use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("rollout diverged at step {step}")]
    RolloutDivergence { step: usize },

    #[error("simulation error at step {step}: {message}")]
    Simulation { step: usize, message: String },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: \
         action_nll={action_nll} state_nll={state_nll} kl={kl} mi_term={mi_term}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        action_nll: f64,
        state_nll: f64,
        kl: f64,
        mi_term: f64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::RolloutDivergence { .. }
        )
    }
}
