//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass, consumed by one
//! backward pass and dropped. Graphs are single-threaded; run independent
//! samples on independent graphs to parallelize.

mod graph;
mod gradcheck;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use gradcheck::finite_diff_gradcheck;
pub use tensor::{matmul_values, Tensor};
