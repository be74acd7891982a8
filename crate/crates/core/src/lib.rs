//! Parameter-efficient fine-tuning of a frozen vision transformer for
//! long-tailed classification.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors and a tape-based reverse-mode differentiator.
//! * [`vit`]: the transformer backbone, its archive layout and parameter census.
//! * [`peft`]: attachable adaptation modules (BitFit, VPT, Adapter, LoRA, AdaptFormer, LN tuning).
//! * [`classifier`]: linear / L2-normalized / cosine heads and their initializers.
//! * [`losses`] and [`metrics`]: logit-adjusted and cross-entropy losses, zero-shot
//!   prediction, shot-split accuracy.
//! * [`tte`]: five-crop test-time ensembling.
//! * [`data`]: synthetic long-tailed data, CIFAR-100 ingestion, augmentation.
//! * [`train`]: the optimizer, training loop, evaluation, audit and reports.

pub mod archive;
pub mod classifier;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod peft;
pub mod rng;
pub mod session;
pub mod tensor;
pub mod train;
pub mod tte;
pub mod vit;

pub use error::{Error, Result};
