//! Desk-scale video-regression framework.
//!
//! The crate stacks up from dense tensors with reverse-mode autodiff, through
//! differentiable layers (3D convolution, pooling, normalization, recurrent
//! cells), to a zoo of spatiotemporal regression architectures, a seeded
//! training loop, metric/agreement evaluation, and a synthetic pulsating-
//! chamber clip generator with analytically known ejection-fraction labels.

pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod models;
pub mod train;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
