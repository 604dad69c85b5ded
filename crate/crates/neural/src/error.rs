use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid layer configuration: {0}")]
    InvalidConfig(String),
    #[error("tensor file has bad magic")]
    BadMagic,
    #[error("tensor file uses unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("tensor file truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
