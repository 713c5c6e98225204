//! Training 1-bit convolutional networks with a learned per-layer weight
//! binarization supervised by noise-corrected sign labels, and deploying the
//! result as bit-packed AND/POPCOUNT models.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`ops`], [`tape`], [`optim`]: dense f32 tensors, NN kernels,
//!   reverse-mode autodiff tape, SGD.
//! - [`binarize`]: sign/straight-through binarization and the bit-packed
//!   inference convolution.
//! - [`noisy_loss`]: class-conditional flip model and the unbiased corrected
//!   square loss with its analytic gradient.
//! - [`mapping`]: per-layer networks predicting binary weights from latent
//!   full-precision weights.
//! - [`model`], [`train`]: model assembly and the two-phase pipeline
//!   (baseline pretrain, then fine-tune with mapping nets).
//! - [`checkpoint`], [`export`]: the `LNS1` training checkpoint and `LNSB`
//!   bit-packed inference model formats.
//! - [`data`], [`synth`]: IDX ingestion, augmentation, batching, and a
//!   synthetic corpus generator for desk-scale experiments.
//! - [`config`], [`metrics`], [`harness`]: experiment configuration, metrics
//!   CSV, and the CLI entry points.

pub mod binarize;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod mapping;
pub mod metrics;
pub mod model;
pub mod data;
pub mod error;
pub mod harness;
pub mod noisy_loss;
pub mod ops;
pub mod optim;
pub mod seeding;
pub mod synth;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{LnsError, Result};
