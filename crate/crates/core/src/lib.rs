//! Differentiable graph generation for graph neural networks.
//!
//! The generator learns, per node, which neighbors to connect to and how
//! many. Edge ranking uses a Gumbel-Softmax relaxation, node degrees are
//! sampled with a Gaussian reparameterization, and a tanh-smoothed step
//! selects the top-k ranked edges while staying differentiable in k. The
//! resulting adjacency feeds a standard GCN trained for node classification.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine over
//! dense `f64` tensors ([`autodiff`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod dgg;
pub mod error;
pub mod gcn;
pub mod nn;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
