//! Kernel padding: odd stride-2 windows become even by appending one
//! bottom row and one right column.
//!
//! For convolutions the appended weights are zero and the extra bottom/right
//! input padding keeps the output grid unchanged, so the padded network
//! computes the same function until it is trained further. Pools have no
//! weights to zero; their window simply grows, which changes the function.

use std::collections::BTreeMap;

use serde::Serialize;

use super::dsl::{ArchSpec, Layer, LayerOp};
use crate::autograd::{ConvGeom, NetGraph, NodeKind, Params, Topology, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Which layers to pad and to what size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadRule {
    /// Odd kernel extent -> even extent (always `k + 1`).
    sizes: BTreeMap<usize, usize>,
    stride: usize,
    pub convs: bool,
    pub pools: bool,
}

impl Default for PadRule {
    /// 7 -> 8, 3 -> 4 and 1 -> 2 on stride-2 convolutions and pools.
    fn default() -> Self {
        PadRule::new([(7, 8), (3, 4), (1, 2)], 2).expect("default rule is well formed")
    }
}

impl PadRule {
    pub fn new(sizes: impl IntoIterator<Item = (usize, usize)>, stride: usize) -> Result<Self> {
        let sizes: BTreeMap<usize, usize> = sizes.into_iter().collect();
        for (&from, &to) in &sizes {
            if from % 2 == 0 || to != from + 1 {
                return Err(Error::InvalidArgument(format!("pad rule {from}->{to}: must map odd k to k+1")));
            }
        }
        if stride < 2 {
            return Err(Error::InvalidArgument("pad rule stride must be at least 2".into()));
        }
        Ok(PadRule { sizes, stride, convs: true, pools: true })
    }

    /// Padded geometry, or `None` when the window is not a target.
    pub fn apply(&self, w: &Window) -> Option<Window> {
        let mut out = *w;
        let mut changed = false;
        for axis in 0..2 {
            if w.stride[axis] == self.stride && self.sizes.contains_key(&w.kernel[axis]) {
                out.kernel[axis] += 1;
                if axis == 0 {
                    out.padding.bottom += 1;
                } else {
                    out.padding.right += 1;
                }
                changed = true;
            }
        }
        changed.then_some(out)
    }

    fn target(&self, kind: &NodeKind) -> Option<Window> {
        match kind {
            NodeKind::Conv(g) if self.convs => self.apply(&g.window),
            NodeKind::MaxPool(w) | NodeKind::AvgPool(w) if self.pools => self.apply(w),
            _ => None,
        }
    }
}

/// One layer rewritten by kernel padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PadChange {
    pub node: usize,
    pub name: String,
    pub op: &'static str,
    pub from: Window,
    pub to: Window,
    /// Whether the padded layer computes the same function before training.
    pub equivalent: bool,
}

/// Rewrites the window geometry of every targeted node.
pub fn pad_topology(topo: &Topology, rule: &PadRule) -> Result<(Topology, Vec<PadChange>)> {
    let mut nodes = topo.nodes().to_vec();
    let mut changes = Vec::new();
    for (i, node) in nodes.iter_mut().enumerate() {
        let Some(to) = rule.target(&node.kind) else { continue };
        let from = *node.kind.window().expect("targets have windows");
        let equivalent = matches!(node.kind, NodeKind::Conv(_));
        node.kind = match node.kind {
            NodeKind::Conv(g) => NodeKind::Conv(ConvGeom { window: to, ..g }),
            NodeKind::MaxPool(_) => NodeKind::MaxPool(to),
            NodeKind::AvgPool(_) => NodeKind::AvgPool(to),
            _ => unreachable!(),
        };
        changes.push(PadChange { node: i, name: node.name.clone(), op: node.kind.label(), from, to, equivalent });
    }
    Ok((Topology::new(nodes)?, changes))
}

/// Applies kernel padding to a built network, zero-extending conv kernels.
pub fn kernel_pad(graph: &NetGraph, rule: &PadRule) -> Result<(NetGraph, Vec<PadChange>)> {
    let (topo, changes) = pad_topology(graph.topology(), rule)?;
    let mut params = graph.params().to_vec();
    for ch in &changes {
        if let Params::Conv { weight, .. } = &mut params[ch.node] {
            *weight = zero_extend(weight, ch.to.kernel);
        }
    }
    Ok((NetGraph::new(topo, params)?, changes))
}

/// Copies `w` into the top-left corner of a larger zero kernel.
pub fn zero_extend(w: &Tensor4, kernel: [usize; 2]) -> Tensor4 {
    let s = w.shape();
    Tensor4::from_fn([s.n, s.c, kernel[0], kernel[1]], |o, c, y, x| {
        if y < s.h && x < s.w {
            w[[o, c, y, x]]
        } else {
            0.0
        }
    })
}

/// Kernel padding at the architecture level.
pub fn pad_spec(spec: &ArchSpec, rule: &PadRule) -> ArchSpec {
    fn walk(layers: &[Layer], rule: &PadRule) -> Vec<Layer> {
        layers
            .iter()
            .map(|l| {
                let op = match &l.op {
                    LayerOp::Conv { window, out_ch, bias } if rule.convs => LayerOp::Conv {
                        window: rule.apply(window).unwrap_or(*window),
                        out_ch: *out_ch,
                        bias: *bias,
                    },
                    LayerOp::MaxPool(w) if rule.pools => LayerOp::MaxPool(rule.apply(w).unwrap_or(*w)),
                    LayerOp::AvgPool(w) if rule.pools => LayerOp::AvgPool(rule.apply(w).unwrap_or(*w)),
                    LayerOp::ResBlock { main, shortcut } => {
                        LayerOp::ResBlock { main: walk(main, rule), shortcut: walk(shortcut, rule) }
                    }
                    other => other.clone(),
                };
                Layer { op, name: l.name.clone() }
            })
            .collect()
    }
    ArchSpec { name: spec.name.clone(), input: spec.input, layers: walk(&spec.layers, rule) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Padding;

    #[test]
    fn size_map() {
        let r = PadRule::default();
        let w = r.apply(&Window::square(3, 2, 1)).unwrap();
        assert_eq!(w.kernel, [4, 4]);
        assert_eq!(w.padding, Padding { top: 1, bottom: 2, left: 1, right: 2 });
        assert_eq!(r.apply(&Window::square(1, 2, 0)).unwrap().kernel, [2, 2]);
        assert_eq!(r.apply(&Window::square(7, 2, 3)).unwrap().kernel, [8, 8]);
        assert_eq!(r.apply(&Window::square(3, 1, 1)), None);
        assert_eq!(r.apply(&Window::square(5, 2, 2)), None);
        assert_eq!(r.apply(&Window::square(4, 2, 1)), None);
    }

    #[test]
    fn output_grid_unchanged() {
        let r = PadRule::default();
        for k in [1, 3, 7] {
            for n in 5..40 {
                let w = Window::square(k, 2, k / 2);
                assert_eq!(w.out_hw(n, n), r.apply(&w).unwrap().out_hw(n, n));
            }
        }
    }

    #[test]
    fn malformed_rules() {
        assert!(PadRule::new([(4, 5)], 2).is_err());
        assert!(PadRule::new([(3, 5)], 2).is_err());
        assert!(PadRule::new([(3, 4)], 1).is_err());
    }
}
