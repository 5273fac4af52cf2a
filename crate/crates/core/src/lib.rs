//! Few-shot classification with a Hippocampus/Neocortex dual network.
//!
//! The fast Hippocampus encoder is trained by SGD on episodes; the slow
//! Neocortex encoder tracks it by exponential moving average and is the only
//! network used at test time. Queries are classified by LogSumExp pooling of
//! dense patch-to-patch cosine similarities, and a long-term memory of class
//! CLS tokens regulates the support prototypes used by an auxiliary loss.
//!
//! Module map:
//! - [`numerics`]: tensors, stable elementary functions, reverse-mode graph.
//! - [`encoder`]: patchify and the small transformer encoder.
//! - [`classifier`]: similarity blocks, masking, per-class LogSumExp logits.
//! - [`memory`]: long-term CLS memory and the global-representation head.
//! - [`consolidation`]: losses, the SGD step and the EMA update.
//! - [`episodic`]: datasets, the synthetic generator, episode sampling.
//! - [`harness`]: the training loop, evaluation, checkpoints and dumps.

pub mod classifier;
pub mod consolidation;
pub mod encoder;
pub mod episodic;
pub mod error;
pub mod harness;
pub mod memory;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::{Real, Tensor};
