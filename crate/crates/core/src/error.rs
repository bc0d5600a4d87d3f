use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("episode is over after {steps} steps; start a new game")]
    EpisodeOver { steps: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("backward called before forward")]
    NoForwardCache,

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("unknown type id {0}")]
    UnknownType(u32),

    #[error("agent identification failed: {0}")]
    Calibration(String),

    #[error("spectra are not separable: inter/intra ratio {ratio:.3} < {required}")]
    Separability { ratio: f64, required: f64 },

    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    UnderfullBuffer { have: usize, need: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
