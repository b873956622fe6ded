//! Library-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} on {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unsupported primitive for differentiation: {0}")]
    UnsupportedPrimitive(String),

    #[error("SPD decomposition failed at pivot {pivot} (value {value:.6e})")]
    DecompositionFailure { pivot: usize, value: f64 },

    #[error("invalid hook: layer {layer}, token {token} (model has {n_layers} layers, sequence length {seq_len})")]
    InvalidHook {
        layer: usize,
        token: usize,
        n_layers: usize,
        seq_len: usize,
    },

    #[error("sequence of {len} tokens exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },

    #[error("invalid span [{start}, {end}) for sequence of {len} tokens")]
    InvalidSpan {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("world construction failed: {0}")]
    Construction(String),

    #[error("unknown relation or template: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("world invariant violated: {0}")]
    InvariantViolation(String),

    #[error("edit sampling failed: {0}")]
    Sampling(String),

    #[error("covariance estimation failed: {0}")]
    Estimation(String),

    #[error("degenerate key: (C^-1 k)^T k = {0:.3e} is below threshold")]
    DegenerateKey(f64),

    #[error("value optimization failed at step {step}: {message}")]
    OptimizationFailure { step: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
