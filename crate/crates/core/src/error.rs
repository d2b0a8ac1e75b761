//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: numeric overflow: output contains non-finite values")]
    NonFinite { op: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already run on this tape; call reset_gradients first")]
    RepeatedBackward,

    #[error("operands were recorded on different tapes")]
    TapeMismatch,

    #[error("function is not deterministic: value changed between calls on the same input")]
    NonDeterministic,

    #[error("invalid {what}: {why}")]
    Invalid { what: String, why: String },

    #[error("training aborted at epoch {epoch}, batch {batch}: {source}")]
    TrainAbort {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found}, this build reads version {supported}; re-export the artifact with a matching build")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated input: needed {needed} more bytes for {what}")]
    Truncated { what: &'static str, needed: usize },

    #[error("sample {index}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        num_classes: u32,
    },

    #[error("tensor {name}: shape mismatch: manifest expects {expected:?}, archive holds {got:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("duplicate tensor name in archive: {name}")]
    DuplicateTensor { name: String },

    #[error("archive is missing tensor {name}")]
    MissingTensor { name: String },

    #[error("archive format error: {0}")]
    Format(String),
}

impl Error {
    pub fn invalid(what: impl Into<String>, why: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            why: why.into(),
        }
    }

    /// True for errors caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::NonDeterministic => true,
            Error::TrainAbort { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
