//! Stochastic subnetwork annealing.
//!
//! Pruned subnetworks of a trained parent are fine-tuned with probabilistic
//! masks: every weight carries a retention probability, a fresh Bernoulli
//! mask is drawn per mini-batch, and the probabilities are annealed toward a
//! binary target mask over a few epochs. The crate also provides the one-shot
//! and iterative pruning baselines, prune-and-tune ensembles built from
//! complementary child masks, calibration metrics, dataset loaders and the
//! experiment harness behind the `ssa` CLI.

pub mod annealing;
pub mod container;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
