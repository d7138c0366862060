use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic bytes in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: &'static str },

    #[error("truncated {what}: expected {expected} bytes of payload, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("zero-norm vector at index {index}")]
    ZeroNorm { index: usize },

    #[error("graph is disconnected: {components} components")]
    Disconnected { components: usize },

    #[error("scan cache is stale: tree or parameters changed since the forward pass")]
    StaleCache,

    #[error("otsu threshold undefined: volume is constant")]
    NoSeparation,

    #[error("mask is not binary: value {value} at index {index}")]
    NotBinary { index: usize, value: f32 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
