use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value at index {index} of array with dims {dims:?}")]
    NonFinite { dims: Vec<usize>, index: usize },

    #[error("loss node must be scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{0}` already registered")]
    DuplicateParameter(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("duplicate voxel coordinate {0:?}")]
    DuplicateCoordinate([i32; 3]),

    #[error("level mismatch: {0} vs {1}")]
    LevelMismatch(usize, usize),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("scene placement infeasible after {0} retries")]
    InfeasiblePlacement(usize),

    #[error("unknown track {0}")]
    UnknownTrack(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
