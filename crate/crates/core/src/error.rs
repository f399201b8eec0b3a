use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({context})")]
    ShapeMismatch {
        lhs: (usize, usize),
        rhs: (usize, usize),
        context: &'static str,
    },

    #[error("k={k} out of range for {len} values")]
    KOutOfRange { k: usize, len: usize },

    #[error("loss node must be scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("zero-norm input to {0}")]
    ZeroNorm(&'static str),

    #[error("batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("all channels flagged as noisy")]
    AllChannelsFlagged,

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
