use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] adastate_tensor::TensorError),

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {reason}")]
    Contract { context: &'static str, reason: String },

    #[error("non-finite {what} at iteration {iteration}; diagnostics: {detail}")]
    NonFiniteLoss {
        what: &'static str,
        iteration: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("probe: {0}")]
    Probe(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn contract(context: &'static str, reason: impl Into<String>) -> Self {
        CoreError::Contract {
            context,
            reason: reason.into(),
        }
    }
}
