use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("sequence has {len} frames, fewer than the required {required}")]
    SequenceTooShort { len: usize, required: usize },

    #[error("wrong training stage: {0}")]
    Stage(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("malformed image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("output directory {0} exists and is not empty")]
    OutputNotEmpty(PathBuf),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Stable numeric code, distinct per failure class. Used as a process exit
    /// status by the command-line tool.
    pub fn code(&self) -> i32 {
        match self {
            Error::Shape { .. } => 10,
            Error::Precondition(_) => 11,
            Error::NonFinite(_) => 12,
            Error::NonScalarLoss(_) => 13,
            Error::MissingGrad(_) => 14,
            Error::UnknownParam(_) => 15,
            Error::DuplicateParam(_) => 16,
            Error::InvalidSpec(_) => 20,
            Error::EmptyDataset => 21,
            Error::SequenceTooShort { .. } => 22,
            Error::Stage(_) => 23,
            Error::CorruptCheckpoint(_) => 30,
            Error::VersionMismatch { .. } => 31,
            Error::CheckpointShape { .. } => 32,
            Error::Image { .. } => 40,
            Error::OutputNotEmpty(_) => 41,
            Error::Manifest(_) => 42,
            Error::Io(_) => 50,
        }
    }
}
