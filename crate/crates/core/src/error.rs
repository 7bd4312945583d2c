use aqs_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AqsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("{kind} parse error at byte {offset}: {msg}")]
    Parse { kind: &'static str, offset: usize, msg: String },
    #[error("non-finite loss at step {step}: first produced by `{op}` (node {node})")]
    NonFiniteLoss { step: usize, op: &'static str, node: usize },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AqsError> = std::result::Result<T, E>;
