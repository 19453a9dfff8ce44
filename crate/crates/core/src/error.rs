use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A relaxed 2x2 block has (a+d, b-c) too close to zero to be projected
    /// onto a rotation.
    #[error("degenerate Givens block in layer {layer} on pair ({lo}, {hi}): eta = {eta:e}")]
    DegenerateBlock {
        layer: usize,
        lo: usize,
        hi: usize,
        eta: f64,
    },

    #[error("no valid samples for the angle metric ({skipped} skipped)")]
    NoValidSamples { skipped: usize },

    #[error("optimization diverged at step {step}: non-finite gradient")]
    Diverged { step: usize },

    #[error("malformed record: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
