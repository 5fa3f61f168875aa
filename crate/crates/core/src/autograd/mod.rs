//! Rank-4 tensor operators with reverse-mode differentiation.

mod graph;
pub mod ops;
mod reduce;

pub use graph::{
    infer_shape, Activations, BnParams, Chw, ConvGeom, Gradients, Mode, NetGraph, NodeDef, NodeKind, ParamGrad,
    ParamRole, ParamSlot, Params, Topology,
};
pub use ops::{Padding, Window};
pub use reduce::Reduction;

use crate::error::Result;
use crate::tensor::Tensor4;

/// Forward in `mode`, reduce node `target` to a scalar, and return the
/// scalar together with its gradient w.r.t. the input.
pub fn input_gradient(
    graph: &NetGraph,
    input: &Tensor4,
    target: usize,
    reduction: Reduction,
    mode: Mode,
) -> Result<(f64, Gradients)> {
    let acts = graph.forward(input, mode)?;
    let act = acts.get(target);
    let value = reduction.apply(act)?;
    let seed = reduction.seed(act)?;
    let grads = graph.backward(&acts, vec![(target, seed)], false)?;
    Ok((value, grads))
}
