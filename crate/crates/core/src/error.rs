//! Crate-wide error type.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite {what} at training iteration {iteration}")]
    NonFinite { iteration: usize, what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("internal consistency violated: {0}")]
    Inconsistent(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
