//! Dense tensors and a dynamic reverse-mode autodiff tape.

mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod value;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use graph::{Function, Graph, Var};
pub use ops::{BatchStats, BN_EPS};
pub use value::Tensor;
