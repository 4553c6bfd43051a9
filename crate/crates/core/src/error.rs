use std::path::PathBuf;

use digest_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DigestError {
    #[error(transparent)]
    Tensor(#[from] NnError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("NIfTI error on {path}: {msg}")]
    Nifti { path: PathBuf, msg: String },
    #[error("missing {modality} volume in {dir}")]
    MissingModality { modality: String, dir: PathBuf },
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("phantom rejected: {0}")]
    Phantom(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("structural mismatch: {0}")]
    Structure(String),
    #[error("value outside the loss domain: {0}")]
    Domain(String),
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },
    #[error("empty test set")]
    EmptyTestSet,
}

impl DigestError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DigestError>;
