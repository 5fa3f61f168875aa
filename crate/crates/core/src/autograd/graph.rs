//! Layer graphs and their forward/reverse evaluation.

use serde::{Deserialize, Serialize};

use super::ops::{self, BnBatch, Window};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Per-item activation extent (channels, rows, cols).
pub type Chw = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub window: Window,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Input,
    Conv(ConvGeom),
    MaxPool(Window),
    AvgPool(Window),
    Relu,
    BatchNorm { channels: usize },
    Add,
    Linear { in_features: usize, out_features: usize },
    GlobalAvgPool,
}

impl NodeKind {
    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv(_) => "conv",
            NodeKind::MaxPool(_) => "maxpool",
            NodeKind::AvgPool(_) => "avgpool",
            NodeKind::Relu => "relu",
            NodeKind::BatchNorm { .. } => "bn",
            NodeKind::Add => "add",
            NodeKind::Linear { .. } => "fc",
            NodeKind::GlobalAvgPool => "gap",
        }
    }

    /// Sliding-window geometry, for ops that have one.
    pub fn window(&self) -> Option<&Window> {
        match self {
            NodeKind::Conv(g) => Some(&g.window),
            NodeKind::MaxPool(w) | NodeKind::AvgPool(w) => Some(w),
            _ => None,
        }
    }

    /// True for ops that keep a spatial layout (everything before the head).
    pub fn is_spatial(&self) -> bool {
        !matches!(self, NodeKind::Linear { .. } | NodeKind::GlobalAvgPool)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDef {
    pub name: String,
    pub kind: NodeKind,
    pub parents: Vec<usize>,
    pub out: Chw,
}

/// Shape-checked DAG of layer nodes in topological order. Node 0 is the
/// single input; the last node is the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    nodes: Vec<NodeDef>,
}

impl Topology {
    /// Validates ordering, arity and shapes. Each node's `out` must equal
    /// what its op produces from its parents.
    pub fn new(nodes: Vec<NodeDef>) -> Result<Self> {
        let first = nodes.first().ok_or_else(|| Error::Graph("empty graph".into()))?;
        if first.kind != NodeKind::Input || !first.parents.is_empty() {
            return Err(Error::Graph("node 0 must be the sole input node".into()));
        }
        for (i, node) in nodes.iter().enumerate().skip(1) {
            if node.kind == NodeKind::Input {
                return Err(Error::Graph(format!("second input node '{}'", node.name)));
            }
            if let Some(&p) = node.parents.iter().find(|&&p| p >= i) {
                return Err(Error::Graph(format!("node '{}' refers forward to node {p}", node.name)));
            }
            let parent_shapes: Vec<Chw> = node.parents.iter().map(|&p| nodes[p].out).collect();
            let expected = infer_shape(&node.name, &node.kind, &parent_shapes)?;
            if expected != node.out {
                return Err(Error::shape(
                    &node.name,
                    format!("declared output {:?} but op produces {:?}", node.out, expected),
                ));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = nodes.iter().find(|n| !seen.insert(n.name.as_str())) {
            return Err(Error::Graph(format!("duplicate node name '{}'", dup.name)));
        }
        Ok(Topology { nodes })
    }

    pub fn nodes(&self) -> &[NodeDef] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_shape(&self) -> Chw {
        self.nodes[0].out
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Index of the last node that still has a spatial layout.
    pub fn last_spatial(&self) -> usize {
        self.nodes.iter().rposition(|n| n.kind.is_spatial()).unwrap_or(0)
    }

    /// Nodes from which `target` can be reached, including itself.
    pub fn ancestors(&self, target: usize) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        mark[target] = true;
        for i in (0..=target).rev() {
            if mark[i] {
                for &p in &self.nodes[i].parents {
                    mark[p] = true;
                }
            }
        }
        mark
    }

    /// Copy truncated after `last`, keeping only its ancestors.
    pub fn truncate_to(&self, last: usize) -> Result<Topology> {
        let keep = self.ancestors(last);
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(last + 1) {
            if keep[i] {
                remap[i] = nodes.len();
                let mut n = node.clone();
                n.parents = n.parents.iter().map(|&p| remap[p]).collect();
                nodes.push(n);
            }
        }
        Topology::new(nodes)
    }
}

/// Output shape of `kind` applied to parents of the given shapes.
pub fn infer_shape(name: &str, kind: &NodeKind, parents: &[Chw]) -> Result<Chw> {
    let want_parents = match kind {
        NodeKind::Input => 0,
        NodeKind::Add => 2,
        _ => 1,
    };
    if parents.len() != want_parents {
        return Err(Error::shape(name, format!("{} takes {want_parents} inputs, got {}", kind.label(), parents.len())));
    }
    let window_out = |w: &Window, [c, h, wd]: Chw, out_c: usize| -> Result<Chw> {
        let (oh, ow) = w.out_hw(h, wd).ok_or_else(|| {
            Error::shape(name, format!("{}x{} window does not fit a {h}x{wd} input", w.kernel[0], w.kernel[1]))
        })?;
        let _ = c;
        Ok([out_c, oh, ow])
    };
    match kind {
        NodeKind::Input => Err(Error::Graph("input shape is declared, not inferred".into())),
        NodeKind::Conv(g) => {
            let p = parents[0];
            if p[0] != g.in_ch {
                return Err(Error::shape(name, format!("conv expects {} input channels, got {}", g.in_ch, p[0])));
            }
            window_out(&g.window, p, g.out_ch)
        }
        NodeKind::MaxPool(w) | NodeKind::AvgPool(w) => {
            let pad = w.padding;
            if pad.top.max(pad.bottom) >= w.kernel[0] || pad.left.max(pad.right) >= w.kernel[1] {
                return Err(Error::shape(name, "pool padding must be smaller than the window"));
            }
            window_out(w, parents[0], parents[0][0])
        }
        NodeKind::Relu => Ok(parents[0]),
        NodeKind::BatchNorm { channels } => {
            if parents[0][0] != *channels {
                return Err(Error::shape(name, format!("bn over {channels} channels applied to {}", parents[0][0])));
            }
            Ok(parents[0])
        }
        NodeKind::Add => {
            if parents[0] != parents[1] {
                return Err(Error::shape(name, format!("add of {:?} and {:?}", parents[0], parents[1])));
            }
            Ok(parents[0])
        }
        NodeKind::Linear { in_features, out_features } => {
            let n: usize = parents[0].iter().product();
            if n != *in_features {
                return Err(Error::shape(name, format!("fc expects {in_features} features, got {n}")));
            }
            Ok([*out_features, 1, 1])
        }
        NodeKind::GlobalAvgPool => Ok([parents[0][0], 1, 1]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    None,
    Conv { weight: Tensor4, bias: Option<Vec<f64>> },
    BatchNorm(BnParams),
    /// Row-major (out, in) weight.
    Linear { weight: Vec<f64>, bias: Vec<f64> },
}

/// Whether a trainable slice is subject to weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    /// conv / fc weights
    Weight,
    Bias,
    /// batch-norm scale and shift
    Affine,
}

/// A named view into one trainable parameter vector.
pub struct ParamSlot<'a> {
    pub name: String,
    pub role: ParamRole,
    pub values: &'a mut [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Argmax(Vec<usize>),
    Bn(BnBatch),
}

/// Activations of every node from one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    values: Vec<Tensor4>,
    caches: Vec<Cache>,
    mode: Mode,
}

impl Activations {
    pub fn get(&self, node: usize) -> &Tensor4 {
        &self.values[node]
    }

    pub fn output(&self) -> &Tensor4 {
        self.values.last().expect("graph has at least an input node")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn into_values(self) -> Vec<Tensor4> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    None,
    Conv { weight: Vec<f64>, bias: Option<Vec<f64>> },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
    Linear { weight: Vec<f64>, bias: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Tensor4,
    /// Per node; empty unless parameter gradients were requested.
    pub params: Vec<ParamGrad>,
    /// False when no seeded node depends on the input; `input` is then zero.
    pub reachable: bool,
}

impl Gradients {
    /// Parameter gradients flattened in the same order as
    /// [`NetGraph::param_slots`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.params {
            match g {
                ParamGrad::None => {}
                ParamGrad::Conv { weight, bias } => {
                    out.push(weight.as_slice());
                    if let Some(b) = bias {
                        out.push(b.as_slice());
                    }
                }
                ParamGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
                ParamGrad::Linear { weight, bias } => {
                    out.push(weight.as_slice());
                    out.push(bias.as_slice());
                }
            }
        }
        out
    }
}

/// A runnable network: a topology plus the parameters of every node.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGraph {
    topo: Topology,
    params: Vec<Params>,
}

impl NetGraph {
    pub fn new(topo: Topology, params: Vec<Params>) -> Result<Self> {
        if params.len() != topo.len() {
            return Err(Error::Graph(format!("{} parameter entries for {} nodes", params.len(), topo.len())));
        }
        for (node, p) in topo.nodes().iter().zip(&params) {
            check_params(node, p)?;
        }
        Ok(NetGraph { topo, params })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn params(&self) -> &[Params] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Params] {
        &mut self.params
    }

    pub fn into_parts(self) -> (Topology, Vec<Params>) {
        (self.topo, self.params)
    }

    pub fn input_shape(&self) -> Chw {
        self.topo.input_shape()
    }

    pub fn forward(&self, input: &Tensor4, mode: Mode) -> Result<Activations> {
        let s = input.shape();
        if [s.c, s.h, s.w] != self.topo.input_shape() {
            return Err(Error::shape(
                &self.topo.nodes()[0].name,
                format!("input {s} does not match declared {:?}", self.topo.input_shape()),
            ));
        }
        let mut values: Vec<Tensor4> = Vec::with_capacity(self.topo.len());
        let mut caches = Vec::with_capacity(self.topo.len());
        for (node, params) in self.topo.nodes().iter().zip(&self.params) {
            let arg = |k: usize| &values[node.parents[k]];
            let (value, cache) = match (&node.kind, params) {
                (NodeKind::Input, _) => (input.clone(), Cache::None),
                (NodeKind::Conv(g), Params::Conv { weight, bias }) => {
                    (ops::conv2d(arg(0), weight, bias.as_deref(), &g.window), Cache::None)
                }
                (NodeKind::MaxPool(w), _) => {
                    let (y, arg_idx) = ops::max_pool(arg(0), w);
                    (y, Cache::Argmax(arg_idx))
                }
                (NodeKind::AvgPool(w), _) => (ops::avg_pool(arg(0), w), Cache::None),
                (NodeKind::Relu, _) => (ops::relu(arg(0)), Cache::None),
                (NodeKind::BatchNorm { .. }, Params::BatchNorm(bn)) => match mode {
                    Mode::Train => {
                        let (y, batch) = ops::batch_norm_train(arg(0), &bn.gamma, &bn.beta);
                        (y, Cache::Bn(batch))
                    }
                    Mode::Eval => (
                        ops::batch_norm_eval(arg(0), &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var),
                        Cache::None,
                    ),
                },
                (NodeKind::Add, _) => {
                    let mut y = arg(0).clone();
                    y.axpy(1.0, arg(1)).map_err(|e| Error::shape(&node.name, e.to_string()))?;
                    (y, Cache::None)
                }
                (NodeKind::Linear { .. }, Params::Linear { weight, bias }) => {
                    (ops::linear(arg(0), weight, bias), Cache::None)
                }
                (NodeKind::GlobalAvgPool, _) => (ops::global_avg_pool(arg(0)), Cache::None),
                (kind, _) => {
                    return Err(Error::Graph(format!("node '{}' ({}) lacks its parameters", node.name, kind.label())))
                }
            };
            let vs = value.shape();
            if [vs.c, vs.h, vs.w] != node.out {
                return Err(Error::shape(&node.name, format!("produced {vs}, declared {:?}", node.out)));
            }
            values.push(value);
            caches.push(cache);
        }
        Ok(Activations { values, caches, mode })
    }

    /// Reverse pass. `seeds` gives d(scalar)/d(activation) for one or more
    /// nodes; the result holds d(scalar)/d(input) and, if requested, the
    /// parameter gradients.
    pub fn backward(&self, acts: &Activations, seeds: Vec<(usize, Tensor4)>, want_params: bool) -> Result<Gradients> {
        let n = self.topo.len();
        let mut grads: Vec<Option<Tensor4>> = vec![None; n];
        let mut reachable = false;
        for (node, seed) in seeds {
            if node >= n {
                return Err(Error::InvalidArgument(format!("seed node {node} out of range")));
            }
            if seed.shape() != acts.values[node].shape() {
                return Err(Error::shape(
                    &self.topo.nodes()[node].name,
                    format!("seed {} does not match activation {}", seed.shape(), acts.values[node].shape()),
                ));
            }
            reachable |= self.topo.ancestors(node)[0];
            accumulate(&mut grads[node], seed);
        }
        let mut param_grads = if want_params { vec![ParamGrad::None; n] } else { Vec::new() };

        for i in (1..n).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.topo.nodes()[i];
            let x = |k: usize| &acts.values[node.parents[k]];
            let p0 = node.parents.first().copied().unwrap_or(0);
            match (&node.kind, &self.params[i]) {
                (NodeKind::Conv(g), Params::Conv { weight, bias }) => {
                    let cg = ops::conv2d_backward(x(0), weight, bias.is_some(), &g.window, &dy, want_params);
                    if want_params {
                        param_grads[i] =
                            ParamGrad::Conv { weight: cg.weight.unwrap_or_default(), bias: cg.bias };
                    }
                    accumulate(&mut grads[p0], cg.input);
                }
                (NodeKind::MaxPool(_), _) => {
                    let Cache::Argmax(arg) = &acts.caches[i] else {
                        return Err(Error::Graph(format!("missing argmax cache for '{}'", node.name)));
                    };
                    accumulate(&mut grads[p0], ops::max_pool_backward(x(0).shape(), arg, &dy));
                }
                (NodeKind::AvgPool(w), _) => {
                    accumulate(&mut grads[p0], ops::avg_pool_backward(x(0).shape(), w, &dy));
                }
                (NodeKind::Relu, _) => accumulate(&mut grads[p0], ops::relu_backward(x(0), &dy)),
                (NodeKind::BatchNorm { .. }, Params::BatchNorm(bn)) => {
                    let bg = match &acts.caches[i] {
                        Cache::Bn(batch) => ops::batch_norm_train_backward(&dy, &bn.gamma, batch),
                        _ => ops::batch_norm_eval_backward(x(0), &dy, &bn.gamma, &bn.running_mean, &bn.running_var),
                    };
                    if want_params {
                        param_grads[i] = ParamGrad::BatchNorm { gamma: bg.gamma, beta: bg.beta };
                    }
                    accumulate(&mut grads[p0], bg.input);
                }
                (NodeKind::Add, _) => {
                    accumulate(&mut grads[node.parents[1]], dy.clone());
                    accumulate(&mut grads[p0], dy);
                }
                (NodeKind::Linear { .. }, Params::Linear { weight, .. }) => {
                    let lg = ops::linear_backward(x(0), weight, &dy, want_params);
                    if want_params {
                        param_grads[i] = ParamGrad::Linear {
                            weight: lg.weight.unwrap_or_default(),
                            bias: lg.bias.unwrap_or_default(),
                        };
                    }
                    accumulate(&mut grads[p0], lg.input);
                }
                (NodeKind::GlobalAvgPool, _) => {
                    accumulate(&mut grads[p0], ops::global_avg_pool_backward(x(0).shape(), &dy));
                }
                (kind, _) => {
                    return Err(Error::Graph(format!("node '{}' ({}) lacks its parameters", node.name, kind.label())))
                }
            }
        }
        if !reachable {
            log::warn!("backward: no seeded node depends on the input; gradient is zero");
        }
        let input = grads[0].take().unwrap_or_else(|| Tensor4::zeros(acts.values[0].shape()));
        Ok(Gradients { input, params: param_grads, reachable })
    }

    /// All trainable parameter vectors in a stable order.
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        for (node, p) in self.topo.nodes.iter().zip(self.params.iter_mut()) {
            let name = &node.name;
            match p {
                Params::None => {}
                Params::Conv { weight, bias } => {
                    out.push(ParamSlot { name: format!("{name}.weight"), role: ParamRole::Weight, values: weight.data_mut() });
                    if let Some(b) = bias {
                        out.push(ParamSlot { name: format!("{name}.bias"), role: ParamRole::Bias, values: b });
                    }
                }
                Params::BatchNorm(bn) => {
                    out.push(ParamSlot { name: format!("{name}.gamma"), role: ParamRole::Affine, values: &mut bn.gamma });
                    out.push(ParamSlot { name: format!("{name}.beta"), role: ParamRole::Affine, values: &mut bn.beta });
                }
                Params::Linear { weight, bias } => {
                    out.push(ParamSlot { name: format!("{name}.weight"), role: ParamRole::Weight, values: weight });
                    out.push(ParamSlot { name: format!("{name}.bias"), role: ParamRole::Bias, values: bias });
                }
            }
        }
        out
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running estimates: `r = (1 - momentum) * r + momentum * batch`.
    pub fn update_running_stats(&mut self, acts: &Activations, momentum: f64) {
        for (p, cache) in self.params.iter_mut().zip(&acts.caches) {
            if let (Params::BatchNorm(bn), Cache::Bn(batch)) = (p, cache) {
                for c in 0..bn.gamma.len() {
                    bn.running_mean[c] = (1.0 - momentum) * bn.running_mean[c] + momentum * batch.mean[c];
                    bn.running_var[c] = (1.0 - momentum) * bn.running_var[c] + momentum * batch.var_unbiased[c];
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor4>, g: Tensor4) {
    match slot {
        Some(acc) => acc.axpy(1.0, &g).expect("gradient shapes agree with activations"),
        None => *slot = Some(g),
    }
}

fn check_params(node: &NodeDef, p: &Params) -> Result<()> {
    let bad = |msg: String| Err(Error::shape(&node.name, msg));
    match (&node.kind, p) {
        (NodeKind::Conv(g), Params::Conv { weight, bias }) => {
            let want = Shape4::new(g.out_ch, g.in_ch, g.window.kernel[0], g.window.kernel[1]);
            if weight.shape() != want {
                return bad(format!("conv weight {} but geometry needs {want}", weight.shape()));
            }
            match bias {
                Some(b) if !g.bias || b.len() != g.out_ch => bad(format!("conv bias of length {}", b.len())),
                None if g.bias => bad("conv declared with bias but none given".into()),
                _ => Ok(()),
            }
        }
        (NodeKind::BatchNorm { channels }, Params::BatchNorm(bn)) => {
            let c = *channels;
            if [bn.gamma.len(), bn.beta.len(), bn.running_mean.len(), bn.running_var.len()] != [c; 4] {
                return bad(format!("bn parameters must all have length {c}"));
            }
            Ok(())
        }
        (NodeKind::Linear { in_features, out_features }, Params::Linear { weight, bias }) => {
            if weight.len() != in_features * out_features || bias.len() != *out_features {
                return bad(format!("fc needs {out_features}x{in_features} weight and {out_features} bias"));
            }
            Ok(())
        }
        (NodeKind::Conv(_) | NodeKind::BatchNorm { .. } | NodeKind::Linear { .. }, _) => {
            bad("missing parameters".into())
        }
        (_, Params::None) => Ok(()),
        (kind, _) => bad(format!("{} takes no parameters", kind.label())),
    }
}
