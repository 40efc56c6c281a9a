//! Road segmentation under synthetic adverse weather.
//!
//! The crate is organized around a small dense-tensor reverse-mode
//! differentiation engine ([`autograd`]) on which a self-attention
//! segmentation autoencoder ([`segnet`]) is built. Procedurally generated
//! road scenes and parametric weather corruptions live in [`weather`].
//! [`curriculum`] scores target images by prediction entropy and partitions
//! them into ordered mini-batches; [`train`] implements supervised
//! pretraining plus the two-step source-free adaptation loop (entropy
//! minimization, then online pseudo-label self-training); [`distill`] adds
//! few-image fine-tuning regularized by weight-space distance to an anchor
//! model. [`metrics`] evaluates binary segmentation quality.
//!
//! All randomness is driven by explicit seeds split into per-purpose
//! streams ([`rng`]); every public entry point is deterministic given its
//! inputs.

pub mod autograd;
pub mod curriculum;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod train;
pub mod weather;

pub use error::{Error, Result};
pub use tensor::{BinaryMask, Tensor};
