use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{len} values exceed the slot capacity {capacity}")]
    CapacityExceeded { len: usize, capacity: usize },
    #[error("level mismatch: {0} vs {1}")]
    LevelMismatch(usize, usize),
    #[error("scale mismatch: {0} vs {1}")]
    ScaleMismatch(f64, f64),
    #[error("slot count mismatch: {0} vs {1}")]
    SlotMismatch(usize, usize),
    #[error("plaintext at level {plain} cannot be applied to a ciphertext at level {cipher}")]
    PlaintextLevel { plain: usize, cipher: usize },
    #[error("level exhausted: cannot rescale below level 0")]
    LevelExhausted,
    #[error("cannot switch from level {from} up to level {to}")]
    LevelRaise { from: usize, to: usize },
    #[error("scale 2^{log_scale:.1} does not fit the modulus at level {level}")]
    ScaleOverflow { log_scale: f64, level: usize },
    #[error("no rotation key for step {0}")]
    MissingRotationKey(usize),
    #[error("secret key not available")]
    MissingSecretKey,
    #[error("object was created under different parameters")]
    ParamMismatch,
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HeError>;
