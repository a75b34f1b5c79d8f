use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] segbound::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at iteration {iter}: loss = {value}")]
    Diverged { iter: u64, value: f64 },

    #[error("gradient check failed: max relative error {max_rel_error} > {tolerance}")]
    GradcheckFailed { max_rel_error: f64, tolerance: f64 },
}

pub type Result<T> = std::result::Result<T, HarnessError>;
