//! Toolkit for merging fine-tuned model checkpoints in weight space.
//!
//! All checkpoints share a pretrained base; each fine-tuned model is reduced
//! to a task vector (its parameter delta from the base) and candidates are
//! recombined with one of several arithmetic merging methods. Merging
//! hyperparameters are selected with the task alignment proxy (TAP): the mean
//! feature-space dissimilarity between a merged encoder and each task's
//! fine-tuned encoder over unlabeled samples. Lower TAP predicts better
//! downstream performance, so hyperparameter selection never needs decoder
//! training.
//!
//! The crate also ships a deterministic toy multi-task benchmark (a small
//! tanh MLP encoder, synthetic regression tasks, closed-form ridge probes)
//! used to validate the TAP-performance correlation end to end, and a
//! gradient-based coefficient optimizer that minimizes the alignment loss
//! directly.

pub mod adamerge;
pub mod error;
pub mod fsutil;
pub mod layers;
pub mod rng;
pub mod merge;
pub mod stats;
pub mod sweep;
pub mod tap;
pub mod task_vector;
pub mod tensor;
pub mod toy;

mod svd;

pub use error::{Error, Result};
pub use tensor::{load_checkpoint, save_checkpoint, validate_compat, SchemaDigest, Tensor, WeightMap};
