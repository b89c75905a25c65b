//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset generation, curation, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("empty video")]
    EmptyVideo,

    #[error("invalid text: {0}")]
    InvalidText(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("classifier unavailable: {0}")]
    ClassifierUnavailable(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("label {label} out of range for {kind} vocabulary of size {size}")]
    LabelOutOfRange {
        kind: &'static str,
        label: usize,
        size: usize,
    },

    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("feature bank not ready: {0}")]
    BankNotReady(String),

    #[error("insufficient negatives: recombination needs at least 2 samples, got {0}")]
    InsufficientNegatives(usize),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("non-finite {term} loss at step {step}")]
    Divergence { term: String, step: usize },

    #[error("insufficient frames: need at least 2, got {0}")]
    InsufficientFrames(usize),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("insufficient data for class {class}: only {count} example(s) in split")]
    InsufficientData { class: String, count: usize },

    #[error("checkpoint: unknown tensor {0}")]
    UnknownTensor(String),

    #[error("checkpoint: truncated blob for tensor {name}: need {need} bytes, have {have}")]
    TruncatedBlob {
        name: String,
        need: usize,
        have: usize,
    },

    #[error("checkpoint: tensor {name} has shape {got:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
