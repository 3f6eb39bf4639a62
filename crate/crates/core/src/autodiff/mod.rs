//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
mod gradcheck;
mod opcheck;
mod ops;
mod params;

pub use graph::{Gradients, Graph, NodeId};
pub use gradcheck::finite_diff_check;
pub use opcheck::{op_names, op_sweep, OpCheck, OPCHECK_EPS};
pub use ops::{Op, Unary};
pub use params::{BoundParams, GradMap, ParamIdx, ParamSet};
