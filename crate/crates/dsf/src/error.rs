use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum DsfError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("batch too small: need at least {need} samples, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("undefined improvement: baseline error rate is zero")]
    UndefinedImprovement,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DsfError>;
