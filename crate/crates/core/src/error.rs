use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{height}x{width} map is not divisible by window size {window}")]
    NonDivisible {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("invalid configuration for head {head}: {reason}")]
    Head { head: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown attention kernel `{0}`")]
    UnknownKernel(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
