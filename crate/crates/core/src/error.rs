use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("training diverged on task `{task}` at step {step} (loss = {loss})")]
    Diverged { task: String, step: usize, loss: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
