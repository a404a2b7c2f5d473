//! Dense local contrastive pre-training and dual-decoder cross-consistency
//! fine-tuning for 2D slice segmentation.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure
//! function of its inputs plus explicit RNG state: file formats, the
//! command-line driver and wall-clock timing live in the `dclseg` crate.
//!
//! Layout:
//! - [`types`]: volumes, slices, label masks and per-slice normalization.
//! - [`views`]: invertible grid transforms, view-pair sampling and
//!   feature-grid correspondences.
//! - [`model`]: encoder, dense (1×1 conv) projection head and the pooled
//!   MLP reference head.
//! - [`losses`]: global and dense InfoNCE with analytic gradients.
//! - [`decoder`]: transposed-conv and bilinear decoders, pseudo-labels and
//!   the cross-consistency fine-tuning loss.
//! - [`train`]: Adam, the pre-training and fine-tuning loops, prediction.
//! - [`metrics`]: Dice, surface distances and per-volume reports.
//! - [`checkpoint`]: the versioned binary container for [`ModelState`].
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod types;
pub mod views;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::Tensor;
pub use train::ModelState;
