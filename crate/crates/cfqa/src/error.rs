use thiserror::Error;

/// Failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged: non-finite loss at {0}")]
    Diverged(String),

    #[error("batch too small: {0}")]
    BatchTooSmall(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
