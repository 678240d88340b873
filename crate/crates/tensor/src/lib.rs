//! Minimal dense-tensor core with reverse-mode automatic differentiation.
//!
//! Every computation is recorded on a [`Graph`] tape as a sequence of
//! primitive applications. Calling [`Graph::backward`] on a scalar node walks
//! the tape in reverse and accumulates gradients into the leaves that were
//! created with `requires_grad`.
//!
//! ```
//! use patchfm_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, UnaryKind, Var};
pub use tensor::Tensor;
