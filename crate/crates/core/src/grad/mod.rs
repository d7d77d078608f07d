//! Minimal reverse-mode differentiable array engine.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{grad_check, CheckReport, REL_FLOOR};
pub use graph::{BoolMask, Gradients, Graph, OpCost, Var};
pub use params::ParamStore;
pub(crate) use params::round_to_f32;
pub use tensor::Tensor;
