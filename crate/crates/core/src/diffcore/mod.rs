//! Minimal reverse-mode differentiation: a vector-valued tape, dense layers,
//! losses, Adam/AdamW and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod params;

pub use gradcheck::{finite_diff_check, finite_diff_check_params, GradCheckReport};
pub use graph::{Gradients, Graph, Node};
pub use loss::{regression_loss, regression_loss_value, softmax, LossKind};
pub use nn::{mlp_apply, Activation, Dense, Mlp};
pub use optim::{AdamConfig, OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore, ParamTensor};

use crate::error::Result;

/// Reverse sweep from `loss`; the tape stays valid for further sweeps.
pub fn backprop(graph: &Graph<'_>, loss: Node) -> Result<Gradients> {
    graph.backward(loss)
}
