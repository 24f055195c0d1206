use gpm_diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GpmError>;
