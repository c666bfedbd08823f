use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file while reading {0}")]
    Truncated(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("tensor count mismatch: expected {expected}, found {found}")]
    TensorCountMismatch { expected: usize, found: usize },

    #[error("malformed tensor {name:?}: {reason}")]
    MalformedTensor { name: String, reason: String },

    #[error("empty eligible set: no sample qualifies for the fooling-rate denominator")]
    EmptyEligibleSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::EmptyEligibleSet => 2,
            Error::MissingArtifact(_)
            | Error::BadMagic { .. }
            | Error::Truncated(_)
            | Error::MissingTensor(_)
            | Error::TensorCountMismatch { .. }
            | Error::MalformedTensor { .. } => 3,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            Error::Io(_) | Error::Csv(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}
