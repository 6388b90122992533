use thiserror::Error;

/// Errors surfaced by the numeric substrate, the model and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("attention row {row} has no admissible key")]
    EmptyMaskRow { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("weights sum to zero")]
    ZeroWeight,

    #[error("sequence of length {len} is shorter than segment length {seg_len}")]
    SequenceTooShort { len: usize, seg_len: usize },

    #[error("stream state mismatch: {0}")]
    StateMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}
