//! Dense multi-label activity recognition with a chain of conditioned 1-D
//! UNets.
//!
//! Stage `i` of a [`ConditionalUNet`] reads the raw sensor channels merged
//! with embeddings of the classes generated for labels `0..i`. Generation is
//! a hard argmax (or a Gumbel-perturbed argmax during training) with a
//! straight-through backward pass, so the whole chain trains end to end on
//! the summed per-label cross-entropy.

pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod train;
pub mod unet;

pub use engine::{AdamConfig, AdamState, SeededRng, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use model::{ChainConfig, ConditionalUNet, IndependentUNet, LabelModel, LabelSpec, Model};
pub use unet::{UNet1D, UNetConfig};
