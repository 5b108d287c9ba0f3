//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! A [`Graph`] records every operation as it runs (define-by-run). Leaves
//! created with [`Graph::param`] receive gradients; constants created with
//! [`Graph::input`] do not, and subgraphs that depend only on constants are
//! never differentiated. This is how frozen parameters stay cheap.

mod conv;
mod elementwise;
mod gradcheck;
mod graph;
pub mod kernels;
mod linalg;
mod reduce;
mod shape;
mod softmax;

pub use conv::ConvParams;
pub use elementwise::{sigmoid, smooth_l1, BinaryKind, UnaryKind};
pub use gradcheck::grad_check;
pub use graph::{Function, Graph, Var};
pub use reduce::ReduceKind;
pub use softmax::{softmax_slice, PROB_FLOOR};
