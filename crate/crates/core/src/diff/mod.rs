//! Minimal reverse-mode differentiable array engine.

pub mod gradcheck;
pub mod graph;
pub mod params;

pub use gradcheck::{check_gradients, numeric_gradients, relative_error, GradCheck};
pub use graph::{conv_out_len, gelu_scalar, DiffGraph, DiffNode, NodeId, Op, LEAKY_SLOPE};
pub use params::{adam_step, AdamConfig, AdamState, Binding, Param, ParamId, ParamStore};
