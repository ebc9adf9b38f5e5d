use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length {len} is not divisible by height {h} (remainder {remainder})")]
    NotDivisible { len: usize, h: usize, remainder: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {what} at flow {flow}, row {row}, column {col}")]
    NonFinite {
        what: &'static str,
        flow: usize,
        row: usize,
        col: usize,
    },

    #[error("non-finite value produced by tape node {node} ({op})")]
    NonFiniteNode { node: usize, op: &'static str },

    #[error("waveform of {len} samples is shorter than one analysis window ({window})")]
    TooShort { len: usize, window: usize },

    #[error("conditioner covers {available} samples but {required} are needed")]
    ConditionerTooShort { available: usize, required: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unsupported WAV format: {0}")]
    UnsupportedWav(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("missing tensor bytes for `{name}`: need {needed} bytes at offset {offset}, blob has {available}")]
    MissingTensorBytes {
        name: String,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("tensor `{name}` has shape {found:?} but the architecture expects {expected:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint blob is {found} bytes, manifest describes {expected}")]
    BlobLength { expected: usize, found: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("loss became non-finite at step {step}; last batch dumped to {dump:?}")]
    NanLoss { step: usize, dump: Option<PathBuf> },

    #[error("queue underflow in layer {layer} at row {row}")]
    QueueUnderflow { layer: usize, row: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteNode { .. }
                | Error::NanLoss { .. }
                | Error::QueueUnderflow { .. }
        )
    }
}
