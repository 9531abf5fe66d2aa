//! Gradient-norm regularized convolutional sentence classification.
//!
//! The training objective adds `lambda * ||dL/dh||_2`, the norm of the loss
//! gradient with respect to the hidden representation feeding the softmax
//! layer, to the cross-entropy loss. Training it requires differentiating a
//! gradient, which [`autodiff`] supports by emitting gradients as graph
//! nodes.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
