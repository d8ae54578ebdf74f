use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: ragged record, expected {expected} values but found {found}")]
    RaggedLength {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: file contains no records")]
    EmptyFile { path: PathBuf },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("container: bad magic {found:?}, expected \"TSV1\"")]
    BadMagic { found: [u8; 4] },

    #[error("container truncated: {0}")]
    Truncated(String),

    #[error("container: {0}")]
    Container(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid pool: {0}")]
    Pool(String),

    #[error("unresolvable pool reference {0}")]
    UnresolvedReference(usize),

    #[error("non-finite weights at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Diverged { .. } | Error::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
