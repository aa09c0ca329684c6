use ckks::HeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    He(#[from] HeError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported layer for homomorphic compilation: {0}")]
    Unsupported(String),
    #[error("depth {needed} exceeds the {available} available levels at layer {layer}")]
    DepthExceeded {
        needed: usize,
        available: usize,
        layer: String,
    },
    #[error("plan metadata mismatch at instruction {index}: expected {expected}, got {actual}")]
    PlanDrift {
        index: usize,
        expected: String,
        actual: String,
    },
    #[error("batch norm statistics are not frozen; fold requires eval-mode statistics")]
    UnfrozenBatchNorm,
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset: {0}")]
    Data(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
