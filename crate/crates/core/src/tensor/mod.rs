//! Dense tensor kernel with reverse-mode differentiation, a finite-difference
//! gradient oracle, and the SGD update rule.

mod gradcheck;
mod graph;
mod optim;

pub use gradcheck::{check_gradient, finite_diff_grad, max_rel_err, DEFAULT_H};
pub use graph::{Graph, NodeId, Tensor};
pub use optim::sgd_update;
