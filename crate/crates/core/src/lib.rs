//! Few-shot feature augmentation on frozen embeddings.
//!
//! Support prototypes are re-represented by a self-attention block and a
//! query-conditioned cross-attention block, then amplified by a variational
//! generator. The augmented set trains a per-task linear classifier.
//!
//! Module map:
//! - [`tensor`]: dense matrices, reverse-mode autodiff, Adam, finite-difference checks
//! - [`data`]: embedding files, episode sampling, synthetic Gaussian-cluster datasets
//! - [`reconstruction`]: positional encoding, attention, the self- and cross-attention blocks
//! - [`vsgm`]: the variational encoder/decoder and feature generation
//! - [`model`]: dimensions, parameter sets, initialization, parameter budgets
//! - [`training`]: episodic meta-training and checkpoints
//! - [`eval`]: frozen-model episodic evaluation, reports, paired comparison
//! - [`config`]: flat `key=value` run configuration

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod par;
pub mod reconstruction;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vsgm;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
