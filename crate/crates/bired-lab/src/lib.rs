//! Desk-scale laboratory for bidirectional editing of a small language model.
//!
//! The pipeline: generate a synthetic fact world, train a small decoder-only
//! transformer on it, build counterfactual editing benchmarks with forward,
//! paraphrase, locality, and reverse prompts, apply rank-one weight edits
//! (plain or with bidirectional relationship objectives, plus a fine-tuning
//! baseline), and score the result in both directions.

pub mod error;
pub mod linalg;
pub mod lm;
pub mod world;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
