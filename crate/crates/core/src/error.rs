use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("frame has no foreground pixel")]
    EmptyFrame,

    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),

    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("invalid synthetic walker parameters: {0}")]
    InvalidParams(String),

    #[error("requested {requested} principal components but data rank is {rank}")]
    DimTooLarge { requested: usize, rank: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("geometry mismatch: expected {expected}, got {actual}")]
    GeometryMismatch { expected: String, actual: String },

    #[error("occlusion degree {0} outside [0, 1]")]
    DegreeOutOfRange(f64),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid state index {index} for {k} key poses")]
    InvalidState { index: usize, k: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("sequence {id} has {len} frames, at least {min} required")]
    SequenceTooShort { id: String, len: usize, min: usize },

    #[error("every frame of sequence {0} is occluded")]
    AllFramesOccluded(String),

    #[error("sequence has no frames")]
    EmptySequence,

    #[error("gallery contains a single class")]
    SingleClass,

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("no evaluation records")]
    EmptyRecords,

    #[error("class {label} has {count} samples, {required} required")]
    InsufficientPerClass {
        label: String,
        count: usize,
        required: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence {id}: {source}")]
    InSequence { id: String, source: Box<Error> },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn in_sequence(self, id: impl Into<String>) -> Self {
        match self {
            e @ Error::InSequence { .. } => e,
            e => Error::InSequence {
                id: id.into(),
                source: Box::new(e),
            },
        }
    }

    /// Pipeline module the error originates from, used in CLI diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            Error::EmptyFrame
            | Error::MissingPath(_)
            | Error::UnreadableImage { .. }
            | Error::InvalidParams(_) => "silhouette",
            Error::DimTooLarge { .. } | Error::InsufficientData(_) => "keypose",
            Error::GeometryMismatch { .. } => "geometry",
            Error::DegreeOutOfRange(_) | Error::LengthMismatch { .. } => "occlusion",
            Error::InvalidState { .. } | Error::DimensionMismatch { .. } | Error::EmptyCorpus => {
                "model"
            }
            Error::SequenceTooShort { .. } | Error::AllFramesOccluded(_) => "temporal_filter",
            Error::EmptySequence | Error::SingleClass | Error::EmptyGallery => "recognizer",
            Error::EmptyRecords | Error::InsufficientPerClass { .. } => "evaluation",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) | Error::InvalidArgument(_) => "config",
            Error::Io { .. } => "io",
            Error::InSequence { source, .. } => source.module(),
        }
    }
}
