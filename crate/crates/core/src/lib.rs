//! Voxel-level contrastive representation learning for 3D volumes.
//!
//! The crate bundles everything needed to pre-train a 3D feature pyramid
//! network so that each voxel is described by the concatenation of its
//! feature vectors across pyramid levels, and to evaluate those
//! representations with linear probing, non-linear probing and fine-tuning:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, Adam.
//! * [`volume`]: the `RVOL1`/`RSEG1` file formats, body masks, cropping, resampling.
//! * [`phantom`]: deterministic synthetic CT-like volumes with organ labels.
//! * [`augment`]: intensity augmentations applied to each patch.
//! * [`sampler`]: overlapping patch pairs and matched voxel positions.
//! * [`model`]: the FPN backbone, projection head and voxel-wise heads.
//! * [`loss`]: InfoNCE and its brute-force reference.
//! * [`train`]: pre-training, probing, fine-tuning and checkpoints.
//! * [`eval`]: sliding-window inference, Dice and cross-validation.
//! * [`config`]: the JSON run configuration.

pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
