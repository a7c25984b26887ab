//! Mixture of prompt-conditioned GNN experts.
//!
//! Raw node features are aligned to a shared width with a truncated SVD,
//! each expert receives its own learnable prompt concatenated to every node,
//! a structure-aware router scores experts by their objective value on the
//! current batch, and predictions are combined by per-expert confidence.
//! Pretraining updates experts and prompts jointly; downstream adaptation
//! freezes the experts and trains only prompts and task heads.
//!
//! The numeric core is generic over [`Scalar`] (`f32` / `f64`); the `*64`
//! and `*32` aliases below fix the common choices.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod alignment;
pub mod error;
pub mod experts;
pub mod graph;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod prompt;
mod linalg;
pub mod rng;
pub mod router;
pub mod scalar;
pub mod trainer;

pub use error::{GmopeError, Result};
pub use scalar::Scalar;

pub type Graph64 = graph::Graph<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type GraphCollection64 = graph::GraphCollection<f64>;
pub type GraphCollection32 = graph::GraphCollection<f32>;
pub type Projection64 = alignment::Projection<f64>;
pub type Projection32 = alignment::Projection<f32>;
pub type PromptBank64 = prompt::PromptBank<f64>;
pub type PromptBank32 = prompt::PromptBank<f32>;
pub type GcnEncoder64 = experts::GcnEncoder<f64>;
pub type GcnEncoder32 = experts::GcnEncoder<f32>;
pub type ExpertEnsemble64 = experts::ExpertEnsemble<f64>;
pub type ExpertEnsemble32 = experts::ExpertEnsemble<f32>;
pub type ModelState64 = trainer::ModelState<f64>;
pub type ModelState32 = trainer::ModelState<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
