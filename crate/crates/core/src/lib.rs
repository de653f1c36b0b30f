//! Structured compression toolkit for small mixture-of-experts transformers.
//!
//! The crate trains a toy MoE teacher, scores weights by first-order
//! sensitivity, slims experts and attention groups structurally, and
//! recovers quality with top-k logit distillation under geometric
//! multi-stage, one-shot and iterative schedules.

pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod persist;
pub mod pipeline;
pub mod pruning;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
