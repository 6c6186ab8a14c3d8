//! A numerical lab for the feature-learning theory of mask-reconstruction
//! pretraining on two-layer smoothed-ReLU networks.
//!
//! The crate generates multi-view / single-view synthetic data, pretrains
//! encoders with a teacher-student or an MAE-style objective, fine-tunes
//! them (or trains from scratch) with cross-entropy, and measures the
//! correlation quantities the theory tracks. See `examples/` for runnable
//! entry points.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod batch;
pub mod dataset;
pub mod downstream;
pub mod error;
pub mod experiment;
pub mod io;
pub mod network;
pub mod oracles;
pub mod pretrain_mae;
pub mod pretrain_ts;
pub mod probe;
pub mod seeds;
pub mod trace;

pub use error::{LabError, Result};
