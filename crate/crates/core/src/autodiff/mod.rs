//! Reverse-mode automatic differentiation over dense tensors.

mod check;
mod graph;

pub use check::{finite_diff_check, finite_diff_check_many};
pub use graph::{CustomOp, Graph, Var};
pub(crate) use graph::{sigmoid, softplus};
