//! Crate-wide error type. Variants carry enough context to name the
//! offending operation, file or dimension in user-facing messages.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // tensor engine
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("backward called before forward (graph has stale values)")]
    BackwardBeforeForward,
    #[error("grad_check requires a scalar-valued function, got {numel} elements")]
    NonScalarOutput { numel: usize },

    // descriptor network
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("wrong patch size: expected side {expected}, got {got}")]
    WrongPatchSize { expected: usize, got: usize },

    // mining
    #[error("descriptor dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("distance matrix row {row} is empty")]
    EmptyRow { row: usize },
    #[error("batch too small: need at least {need} rows, got {got}")]
    BatchTooSmall { need: usize, got: usize },
    #[error("duplicate track id {0} in batch")]
    DuplicateTrackIds(u64),

    // losses
    #[error("negative distance passed to loss: {0}")]
    NegativeDistance(f64),
    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    // scheduling
    #[error("insufficient tracks: store '{store}' has {got}, batch needs {need}")]
    InsufficientTracks { store: String, got: usize, need: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    // dataset
    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("malformed keypoint import {path}: line {line}: {detail}")]
    MalformedImport { path: PathBuf, line: usize, detail: String },
    #[error("patch window out of bounds: center ({x:.1}, {y:.1}) side {side} in {width}x{height} frame")]
    OutOfBounds { x: f64, y: f64, side: usize, width: usize, height: usize },
    #[error("corrupt manifest {path}: {detail}")]
    CorruptManifest { path: PathBuf, detail: String },
    #[error("missing patch file {0}")]
    MissingPatchFile(PathBuf),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    // eval
    #[error("ranked list has no positive labels{0}")]
    NoPositives(String),

    // io / formats
    #[error("bad checkpoint {path}: {detail}")]
    BadCheckpoint { path: PathBuf, detail: String },
    #[error("bad config file {path}: line {line}: {detail}")]
    BadConfigFile { path: PathBuf, line: usize, detail: String },
    #[error("bad pgm file {path}: {detail}")]
    BadPgm { path: PathBuf, detail: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
