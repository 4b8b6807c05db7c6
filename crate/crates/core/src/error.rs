use std::path::PathBuf;

use crate::tensor::{FormatError, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    At { path: String, source: Box<Error> },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    NonFinite { step: usize, lr: f64, grad_norm: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Prefixes errors with the module path they surfaced in.
pub trait Context<T> {
    fn at(self, path: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: Into<Error>> Context<T> for std::result::Result<T, E> {
    fn at(self, path: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::At { path: path(), source: Box::new(e.into()) })
    }
}
