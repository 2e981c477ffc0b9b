//! Sequential next-item recommendation with multi-query causal
//! self-attention and transition-aware embedding distillation.
//!
//! - [`kernel`]: dense `f64` tensors, reverse-mode tape, Adam, gradient checks
//! - [`dataio`]: sequence files, the leave-one-out split and padded batching
//! - [`transition`]: item-transition graph with pseudo-labels, plus the transition recommender
//! - [`model`]: embeddings, attention branches, losses, checkpoints
//! - [`trainer`]: training loop with early stopping
//! - [`evaluator`]: full-ranking HR/NDCG and transition-frequency buckets
//! - [`synth`]: synthetic corpora for experiments

pub mod dataio;
pub mod evaluator;
pub mod kernel;
pub mod model;
pub mod synth;
pub mod trainer;
pub mod transition;
