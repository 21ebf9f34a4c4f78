use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data at byte {offset}: {message}")]
    Corruption { offset: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("training fault at episode {episode} (episode seed {seed:#018x}): {message}")]
    TrainingFault {
        episode: u64,
        seed: u64,
        message: String,
    },

    #[error("comparison mismatch: {0}")]
    Mismatch(String),

    #[error("gradient check invalid: {0}")]
    InvalidCheck(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn corrupt(offset: u64, msg: impl Into<String>) -> Self {
        Error::Corruption {
            offset,
            message: msg.into(),
        }
    }
}
