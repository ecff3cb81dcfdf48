//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("negative weight {weight} at atom {index}")]
    NegativeWeight { index: usize, weight: f64 },

    #[error("index {index} out of range (len {len}) in {context}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("policy family expects {expected} parameters, got {got}")]
    ParamsLength { expected: usize, got: usize },

    #[error("policy family {family} is not measurable for information class {class}")]
    ClassMismatch { family: String, class: String },

    #[error("parameter grid of {size} points exceeds the 10^6 guard")]
    GridTooLarge { size: u128 },

    #[error("coefficient evaluation failed at scenario {scenario}, particle {particle}, step {step}: {message}")]
    Coefficient {
        scenario: usize,
        particle: usize,
        step: usize,
        message: String,
    },

    #[error("non-finite state at scenario {scenario}, particle {particle}, step {step}")]
    NonFiniteState {
        scenario: usize,
        particle: usize,
        step: usize,
    },

    #[error("enumeration size {size} exceeds the 10^6 guard")]
    EnumerationGuard { size: u128 },

    #[error("Riccati blow-up: |{which}| exceeded 1e8 during backward integration")]
    RiccatiBlowUp { which: &'static str },

    #[error("summary pushforwards differ: W2 = {w2:.3e} exceeds 1e-9")]
    SummaryMismatch { w2: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
