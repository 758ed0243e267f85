use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pruning engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("shape mismatch for tensor `{name}`: manifest expects {expected} values, found {found}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in tensor `{name}` at index {index}")]
    NonFinite { name: String, index: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("layer `{name}` has unsupported kind: {reason}")]
    UnsupportedKind { name: String, reason: String },

    #[error("refused: {0}")]
    Refused(String),

    #[error("empty layer set")]
    EmptyLayerSet,

    #[error("requested {requested} layers but only {eligible} are eligible")]
    InsufficientLayers { requested: usize, eligible: usize },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("evaluator does not support `{0}`")]
    Capability(&'static str),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("evaluator returned error `{code}`: {message}")]
    Remote { code: String, message: String },

    #[error("timed out waiting for `{0}` response")]
    Timeout(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bounds exceeded: {0}")]
    Bounds(String),

    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for failures that originate in the evaluator or trainer.
    pub fn is_evaluator_error(&self) -> bool {
        matches!(
            self,
            Error::Capability(_)
                | Error::Protocol(_)
                | Error::Remote { .. }
                | Error::Timeout(_)
                | Error::Divergence(_)
        )
    }

    /// True for failures loading or validating a model container.
    pub fn is_model_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::Manifest { .. }
                | Error::ShapeMismatch { .. }
                | Error::NonFinite { .. }
                | Error::UnknownLayer(_)
                | Error::Corrupt { .. }
                | Error::Version { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
