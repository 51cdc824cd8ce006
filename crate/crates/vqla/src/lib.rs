//! Grounded visual question answering at desk scale.
//!
//! The stack: a patch-embedding vision transformer, a word-level tokenizer
//! and causal decoder with state-space low-rank adapters on its attention
//! projections, a token-interaction alignment projection, and a co-attention
//! grounding head that answers with a class and a normalized bounding box.
//! Around the model sit an instruction-data factory with a deterministic mock
//! generator, a two-stage training pipeline with freeze contracts, and an
//! evaluation harness (accuracy, macro-F1, mean IoU, token-overlap rubric).
//!
//! See the crate `examples/` directory for one runnable program per
//! capability, and the `vqla` binary for the file-driven command surface.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gradsuite;
pub mod grounding;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod projection;
pub mod vp_lora;

pub use error::{Result, VqlaError};
