//! Object-centric scene decomposition on a small reverse-mode autodiff
//! tensor core: iterative slot attention with interchangeable slot
//! initialization strategies and gradient regimes, a CNN encoder and
//! mixture decoder, a deterministic sprite-scene generator, segmentation
//! and reconstruction metrics, and a training/evaluation harness.

pub mod error;
pub mod harness;
pub mod codec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scenegen;
pub mod slot;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{backward, no_grad, Dtype, Element, Shape, Tensor};
