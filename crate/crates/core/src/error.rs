use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported norm order {0} for this operation")]
    UnsupportedNorm(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRate { expected: u32, found: u32 },

    #[error("signal too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
