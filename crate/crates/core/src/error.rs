use mmm_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmmError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("failed to load {path}: {msg}")]
    Load { path: String, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MmmError {
    /// Errors caused by bad arguments or inputs rather than a failed run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            MmmError::Usage(_) | MmmError::Load { .. } | MmmError::Degenerate(_)
        ) || matches!(self, MmmError::Autodiff(AutodiffError::Usage(_)))
    }
}

pub type Result<T> = std::result::Result<T, MmmError>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(MmmError::Usage(msg.into()))
}
