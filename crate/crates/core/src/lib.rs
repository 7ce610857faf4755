//! Report generation from images through a learned tag graph.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: f64 tensors, reverse-mode autodiff, Adam, seeded RNG.
//! - [`nn`]: linear layers, layer norm, attention, GRU.
//! - [`vision`]: convolutional backbones, saliency heat maps, max connected
//!   region extraction, crop/resize, feature fusion and tag branches.
//! - [`graph`]: the tag-graph encoder and its classification losses.
//! - [`decoder`]: vocabulary, the masked-attention language decoder, greedy
//!   generation and the GRU sentence encoder used for pretraining.
//! - [`data`]: synthetic dataset and textbook generator plus on-disk formats.
//! - [`metrics`]: BLEU, ROUGE-L, CIDEr-D and AUC.
//! - [`pipeline`]: configuration, checkpoints, the three training phases and
//!   the command surface behind the `asgk` binary.

pub mod data;
pub mod decoder;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod vision;

pub use tensor::{backward, no_grad, Gradients, Tensor, TensorError};
