use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs_name} {lhs:?} and {rhs_name} {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs_name: &'static str,
        lhs: Vec<usize>,
        rhs_name: &'static str,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe a buffer of {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} is out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"RLAB\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: u64, needed: u64, len: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("header field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("tensor `{name}` declares shape {shape:?} ({bytes} bytes) but payload at offset {offset} has only {available} bytes")]
    PayloadMismatch {
        name: String,
        shape: Vec<usize>,
        offset: u64,
        bytes: u64,
        available: u64,
    },
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    UnexpectedParameter(String),
    #[error("parameter `{name}` has shape {found:?}, config requires {expected:?}")]
    ShapeForConfig {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} at position {position} is outside vocab of size {vocab}")]
    TokenOutOfRange { id: u32, position: usize, vocab: usize },
    #[error("type id {id} at position {position} is outside type vocab of size {vocab}")]
    TypeOutOfRange { id: u32, position: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token and type id lengths differ ({tokens} vs {types})")]
    LengthMismatch { tokens: usize, types: usize },
    #[error("empty input sequence")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurgeryError {
    #[error("k={k} is outside 0..={layers}")]
    InvalidK { k: usize, layers: usize },
    #[error("block start={start} len={len} does not fit in {layers} layers")]
    InvalidBlock { start: usize, len: usize, layers: usize },
    #[error("layer {k} is outside 1..={layers}")]
    InvalidLayer { k: usize, layers: usize },
    #[error("not a permutation of 1..={layers}: {permutation:?}")]
    InvalidPermutation { permutation: Vec<usize>, layers: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("requested subsample of {requested} exceeds train split of {available}")]
    SubsampleTooLarge { requested: usize, available: usize },
    #[error("dataset size must be at least {min}, got {n}")]
    TooSmall { n: usize, min: usize },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid grammar: {0}")]
    Grammar(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        step: usize,
        detail: String,
    },
    #[error("empty input")]
    Empty,
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("layer {k} is outside 0..={layers}")]
    InvalidLayer { k: usize, layers: usize },
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined: zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("degenerate samples: {0}")]
    Degenerate(String),
    #[error("non-finite sample value")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checkpoint not found at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("results store at {0} is empty")]
    EmptyStore(PathBuf),
    #[error("incomplete grid; missing cells: {}", .0.join(", "))]
    Incomplete(Vec<String>),
    #[error("trial {cell}/{trial} failed: {source}")]
    Trial {
        cell: String,
        trial: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Train(Box<TrainError>),
}

impl From<TrainError> for RunnerError {
    fn from(e: TrainError) -> Self {
        Self::Train(Box::new(e))
    }
}

impl RunnerError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable discriminant, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Manifest(_) => "manifest",
            Self::MissingCheckpoint(_) => "missing_checkpoint",
            Self::Io { .. } => "io",
            Self::Json { .. } => "json",
            Self::EmptyStore(_) => "empty_store",
            Self::Incomplete(_) => "incomplete_grid",
            Self::Trial { .. } => "trial",
            Self::Checkpoint(_) => "checkpoint",
            Self::Surgery(_) => "surgery",
            Self::Data(_) => "data",
            Self::Stats(_) => "stats",
            Self::Train(_) => "train",
        }
    }
}
