//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass; calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns [`Gradients`] for every node that depends on a [`Graph::param`].
//!
//! ```
//! use kdlab_compute::{Graph, Tensor};
//!
//! let mut g = Graph::<f32>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.constant(Tensor::scalar(5.0));
//! let xy = g.mul(x, y).unwrap();
//! let grads = g.backward(xy).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 5.0);
//! ```
//!
//! All reductions run in a fixed sequential order, so identical inputs give
//! bit-identical values and gradients.

mod graph;
pub mod kernels;
mod ops;
mod tensor;

pub use graph::{AttentionMask, Gradients, Graph, Var};
pub use tensor::{Element, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ComputeError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("empty batch: every target position is padding")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, ComputeError>;
