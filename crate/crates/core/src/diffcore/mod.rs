//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! The op vocabulary is exactly what the encoders and losses need: matrix
//! products, broadcast adds, ReLU/hinge, row softmax, guarded L2
//! normalization, reductions, smooth-L1, max-pooling and index gathers.

mod check;
mod graph;
mod tensor;

pub use check::{forward, forward_backward, gradient_check};
pub use graph::{Graph, Var, GATHER_ZERO, NORM_EPS};
pub use tensor::{ParamStore, Tensor};

pub(crate) use graph::smooth_l1;
