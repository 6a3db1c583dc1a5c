//! Audiovisual transformer for weakly labeled sound event classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`], [`params`], [`optim`], [`gradcheck`]: dense
//!   `f64` tensors, reverse-mode differentiation, Adam and a
//!   finite-difference checker;
//! - [`attention`]: scaled dot-product attention with softmax, sigmoid and
//!   normalized-sigmoid weight functions, and the multi-head block;
//! - [`model`]: the encoder-decoder network over two embedding streams;
//! - [`training`], [`evaluation`]: balanced sampling, cross-entropy
//!   training with early stopping and snapshot ensembling, micro-F1 and
//!   threshold calibration;
//! - [`data`], [`checkpoint`]: embedding files, manifests, batching,
//!   synthetic data and model checkpoints.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::RandomSource;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
