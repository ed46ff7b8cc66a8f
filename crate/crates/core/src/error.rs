use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("bundle format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("non-finite objective at evaluation {evaluation}: {detail}")]
    NonFinite { evaluation: usize, detail: String },

    #[error("tag maps disagree: {0}")]
    TagMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
