use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown task id {0}")]
    UnknownTask(usize),
    #[error("self-relation: task pair ({0}, {0}) is undefined")]
    SelfRelation(usize),
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("division by zero STL reference for task {0}")]
    ZeroReference(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch")]
    Checksum,
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("non-finite loss at step {step} (lr {lr}): {term}")]
    NonFinite { step: usize, lr: f64, term: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
