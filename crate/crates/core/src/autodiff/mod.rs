//! Small reverse-mode automatic differentiation engine over `f64` tensors.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, relative_error, GradCheck, REL_FLOOR};
pub use graph::{column_moments, Graph, Var};
pub use tensor::{cosine, dot, l2_norm, Tensor};
