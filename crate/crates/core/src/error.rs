use std::path::PathBuf;

use crate::diffnum::DiffError;
use crate::odeint::OdeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: expected format version {expected}, found {found}")]
    Version { path: PathBuf, expected: u32, found: u32 },
    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("sequence {index}: {source}")]
    Sequence { index: usize, source: Box<Error> },
    #[error("non-finite loss at step {step} (sequence {index})")]
    NonFiniteLoss { step: usize, index: usize },
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("{0}")]
    Model(String),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }

    /// Process exit status: 2 for missing inputs, 3 for bad configuration,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Config { .. } => 3,
            Error::Sequence { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
