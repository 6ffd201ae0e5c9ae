use std::path::PathBuf;

use thiserror::Error;

/// Which logit tensor of a sample an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitTensor {
    Class,
    Mask,
}

impl std::fmt::Display for LogitTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LogitTensor::Class => f.write_str("class logits"),
            LogitTensor::Mask => f.write_str("mask logits"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {tensor} at flat index {index}")]
    NonFiniteLogit { tensor: LogitTensor, index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty tensor: queries, classes and pixels must all be non-zero")]
    EmptyTensor,
    #[error("wrong transform: expected {expected}, found {found}")]
    WrongTransform { expected: &'static str, found: String },
    #[error("degenerate target size {0}x{1}")]
    DegenerateTarget(usize, usize),
    #[error("no flow field for prior frame offset {0}")]
    MissingFlow(u8),
    #[error("mixed class counts in one ensemble: expected c_total={expected}, found {found}")]
    MixedClassCount { expected: usize, found: usize },
    #[error("ensemble contains no samples")]
    EmptyEnsemble,
    #[error("accumulator has not seen any samples")]
    NoSamples,
    #[error("no valid (non-void) classes in image")]
    NoValidClasses,
    #[error("empty input")]
    EmptyInput,
    #[error("labels must contain at least one positive and one negative")]
    DegenerateLabels,
    #[error("could not place object {0} after bounded retries")]
    Unplaceable(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("truncated input at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("no baseline rows for group {0}")]
    MissingBaseline(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
