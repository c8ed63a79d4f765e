use thiserror::Error;

/// Errors produced by table construction, inference and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown function `{0}`")]
    UnknownFunction(String),

    #[error("unsupported function: {0}")]
    Unsupported(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged at step {step} (loss {loss:e})")]
    Diverged {
        step: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(offset: u64, reason: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            reason: reason.into(),
        }
    }
}
