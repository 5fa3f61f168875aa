//! Theoretical receptive fields and window coverage counts.
//!
//! The theoretical receptive field (TRF) follows the usual recurrence along
//! each path from the input: `r <- r + (k - 1) * j`, `j <- j * s`. Residual
//! joins take the per-axis maximum of their branches and require equal jumps.
//!
//! Coverage counts explain the checkerboard in gradient-based receptive
//! fields without any gradients: each input pixel is weighted by the number
//! of window-reference paths that connect it to the output grid. An odd
//! window with stride 2 references every other pixel twice, and the
//! multiplicity compounds through depth.

use serde::Serialize;

use crate::autograd::{ConvGeom, NetGraph, NodeDef, NodeKind, Params, Topology, Window};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::tensor::Tensor4;

/// Receptive-field record of one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RfInfo {
    /// (rows, cols) in input pixels.
    pub rf_size: [usize; 2],
    /// Input-pixel spacing between adjacent features.
    pub jump: [usize; 2],
    /// Input coordinate of the centre of the first feature's field.
    pub start: [f64; 2],
}

impl RfInfo {
    const INPUT: RfInfo = RfInfo { rf_size: [1, 1], jump: [1, 1], start: [0.0, 0.0] };

    fn through(&self, w: &Window) -> RfInfo {
        let mut out = *self;
        for a in 0..2 {
            let k = w.kernel[a];
            let lo = if a == 0 { w.padding.top } else { w.padding.left } as f64;
            out.rf_size[a] = self.rf_size[a] + (k - 1) * self.jump[a];
            out.start[a] = self.start[a] + ((k as f64 - 1.0) / 2.0 - lo) * self.jump[a] as f64;
            out.jump[a] = self.jump[a] * w.stride[a];
        }
        out
    }
}

/// TRF of every node.
pub fn trf_all(topo: &Topology) -> Result<Vec<RfInfo>> {
    let mut out: Vec<RfInfo> = Vec::with_capacity(topo.len());
    for node in topo.nodes() {
        let info = match &node.kind {
            NodeKind::Input => RfInfo::INPUT,
            NodeKind::Conv(ConvGeom { window, .. }) | NodeKind::MaxPool(window) | NodeKind::AvgPool(window) => {
                out[node.parents[0]].through(window)
            }
            NodeKind::Relu | NodeKind::BatchNorm { .. } => out[node.parents[0]],
            NodeKind::Add => {
                let (a, b) = (out[node.parents[0]], out[node.parents[1]]);
                if a.jump != b.jump {
                    return Err(Error::Graph(format!(
                        "join '{}' merges branches with jumps {:?} and {:?}",
                        node.name, a.jump, b.jump
                    )));
                }
                RfInfo { rf_size: [a.rf_size[0].max(b.rf_size[0]), a.rf_size[1].max(b.rf_size[1])], ..a }
            }
            // Global ops see their whole input: a window spanning the parent map.
            NodeKind::GlobalAvgPool | NodeKind::Linear { .. } => {
                let parent = &topo.nodes()[node.parents[0]];
                let whole = Window { kernel: [parent.out[1], parent.out[2]], stride: [1, 1], padding: Default::default() };
                out[node.parents[0]].through(&whole)
            }
        };
        out.push(info);
    }
    Ok(out)
}

pub fn compute_trf(topo: &Topology, target: usize) -> Result<RfInfo> {
    if target >= topo.len() {
        return Err(Error::InvalidArgument(format!("node {target} out of range")));
    }
    Ok(trf_all(topo)?[target])
}

/// Exact per-pixel reference counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMap {
    pub h: usize,
    pub w: usize,
    pub counts: Vec<u128>,
}

impl CoverageMap {
    pub fn get(&self, y: usize, x: usize) -> u128 {
        self.counts[y * self.w + x]
    }

    pub fn to_field(&self) -> Field {
        Field::from_vec(self.h, self.w, self.counts.iter().map(|&c| c as f64).collect()).expect("sized map")
    }

    /// Whether all counts inside `[margin, h - margin) x [margin, w - margin)` agree.
    pub fn is_uniform_interior(&self, margin: usize) -> bool {
        let mut vals = (margin..self.h.saturating_sub(margin))
            .flat_map(|y| (margin..self.w.saturating_sub(margin)).map(move |x| (y, x)))
            .map(|(y, x)| self.get(y, x));
        match vals.next() {
            Some(first) => vals.all(|v| v == first),
            None => true,
        }
    }
}

/// Coverage of the input by every position of the last spatial node.
pub fn coverage_counts(topo: &Topology) -> Result<CoverageMap> {
    let last = topo.last_spatial();
    let [_, h, w] = topo.nodes()[last].out;
    coverage_from(topo, last, &vec![1; h * w])
}

/// Coverage of the input by a single position of `node`.
pub fn coverage_of_feature(topo: &Topology, node: usize, (y, x): (usize, usize)) -> Result<CoverageMap> {
    let [_, h, w] = topo.nodes()[node].out;
    if y >= h || x >= w {
        return Err(Error::InvalidArgument(format!("position ({y},{x}) outside {h}x{w}")));
    }
    let mut seed = vec![0; h * w];
    seed[y * w + x] = 1;
    coverage_from(topo, node, &seed)
}

fn overflow() -> Error {
    Error::Numeric("coverage count exceeds u128".into())
}

/// Transposed propagation of integer counts from `seed` (laid out over the
/// spatial grid of `target`) back to the input.
fn coverage_from(topo: &Topology, target: usize, seed: &[u128]) -> Result<CoverageMap> {
    let nodes = topo.nodes();
    let mut counts: Vec<Option<Vec<u128>>> = vec![None; topo.len()];
    counts[target] = Some(seed.to_vec());
    for i in (1..=target).rev() {
        let Some(c) = counts[i].take() else { continue };
        let node = &nodes[i];
        match &node.kind {
            NodeKind::Conv(ConvGeom { window, .. }) | NodeKind::MaxPool(window) | NodeKind::AvgPool(window) => {
                let parent = &nodes[node.parents[0]];
                let back = scatter_window(&c, node, parent, window)?;
                add_into(&mut counts[node.parents[0]], back)?;
            }
            NodeKind::Relu | NodeKind::BatchNorm { .. } => add_into(&mut counts[node.parents[0]], c)?,
            NodeKind::Add => {
                add_into(&mut counts[node.parents[1]], c.clone())?;
                add_into(&mut counts[node.parents[0]], c)?;
            }
            NodeKind::Input | NodeKind::GlobalAvgPool | NodeKind::Linear { .. } => {
                return Err(Error::Graph(format!("coverage through non-spatial node '{}'", node.name)))
            }
        }
    }
    let [_, h, w] = topo.input_shape();
    let counts = counts[0].take().unwrap_or_else(|| vec![0; h * w]);
    Ok(CoverageMap { h, w, counts })
}

fn scatter_window(c: &[u128], node: &NodeDef, parent: &NodeDef, win: &Window) -> Result<Vec<u128>> {
    let [_, oh, ow] = node.out;
    let [_, ih, iw] = parent.out;
    let mut back = vec![0u128; ih * iw];
    for oy in 0..oh {
        for ox in 0..ow {
            let v = c[oy * ow + ox];
            if v == 0 {
                continue;
            }
            for ky in 0..win.kernel[0] {
                let iy = (oy * win.stride[0] + ky) as isize - win.padding.top as isize;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                for kx in 0..win.kernel[1] {
                    let ix = (ox * win.stride[1] + kx) as isize - win.padding.left as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let slot = &mut back[iy as usize * iw + ix as usize];
                    *slot = slot.checked_add(v).ok_or_else(overflow)?;
                }
            }
        }
    }
    Ok(back)
}

fn add_into(slot: &mut Option<Vec<u128>>, v: Vec<u128>) -> Result<()> {
    match slot {
        None => *slot = Some(v),
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(v) {
                *a = a.checked_add(b).ok_or_else(overflow)?;
            }
        }
    }
    Ok(())
}

/// Single-channel linear stand-in for the spatial part of `topo`: every
/// window op becomes an all-ones convolution of the same geometry and every
/// elementwise op an identity 1x1 convolution. The input gradient of the sum
/// of its final activations equals [`coverage_counts`].
pub fn linearized(topo: &Topology) -> Result<NetGraph> {
    let spatial = topo.truncate_to(topo.last_spatial())?;
    let identity = Window::square(1, 1, 0);
    let mut nodes = Vec::with_capacity(spatial.len());
    let mut params = Vec::with_capacity(spatial.len());
    for node in spatial.nodes() {
        let [_, h, w] = node.out;
        let mut n = node.clone();
        n.out = [1, h, w];
        let window = match &node.kind {
            NodeKind::Input | NodeKind::Add => None,
            NodeKind::Conv(ConvGeom { window, .. }) | NodeKind::MaxPool(window) | NodeKind::AvgPool(window) => {
                Some(*window)
            }
            NodeKind::Relu | NodeKind::BatchNorm { .. } => Some(identity),
            NodeKind::GlobalAvgPool | NodeKind::Linear { .. } => unreachable!("truncated to the spatial part"),
        };
        match window {
            Some(window) => {
                n.kind = NodeKind::Conv(ConvGeom { in_ch: 1, out_ch: 1, window, bias: false });
                params.push(Params::Conv { weight: Tensor4::filled([1, 1, window.kernel[0], window.kernel[1]], 1.0), bias: None });
            }
            None => params.push(Params::None),
        }
        nodes.push(n);
    }
    NetGraph::new(Topology::new(nodes)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::ArchSpec;

    fn topo(text: &str) -> Topology {
        ArchSpec::parse(text).unwrap().topology().unwrap()
    }

    #[test]
    fn stacked_3x3() {
        let t = topo("input 1 32 32\nconv 3 1 1 1\nconv 3 1 1 1\nconv 3 1 1 1\n");
        let all = trf_all(&t).unwrap();
        assert_eq!(all[2].rf_size, [5, 5]);
        assert_eq!(all[3].rf_size, [7, 7]);
        assert_eq!(all[3].jump, [1, 1]);
    }

    #[test]
    fn strides_multiply_jump() {
        let t = topo("input 1 64 64\nconv 3 2 1 1\nrelu\nmaxpool 3 2 1\nconv 3 1 1 1\n");
        let info = compute_trf(&t, t.output()).unwrap();
        assert_eq!(info.jump, [4, 4]);
        assert_eq!(info.rf_size, [3 + 2 * 2 + 2 * 4, 15]);
    }

    #[test]
    fn join_jump_mismatch_is_structural_error() {
        // Shapes agree (8x8 from 16x16 either way) but the strides differ per branch.
        let t = topo("input 1 16 16\nresblock {\nconv 2 2 0 1\n} shortcut {\nconv 9 1 0 1\n}\n");
        assert!(matches!(trf_all(&t), Err(Error::Graph(_))));
    }

    #[test]
    fn interior_window_counts() {
        let t = topo("input 1 12 12\nconv 3 1 1 1\n");
        let c = coverage_counts(&t).unwrap();
        assert!(c.is_uniform_interior(1));
        assert_eq!(c.get(5, 5), 9);
        assert_eq!(c.get(0, 0), 4);
        assert_eq!(c.get(0, 5), 6);
    }

    #[test]
    fn odd_stride_two_alternates() {
        // Enumerated by hand: with pad 1, odd rows/cols are covered by two windows per axis.
        let t = topo("input 1 12 12\nconv 3 2 1 1\n");
        let c = coverage_counts(&t).unwrap();
        assert_eq!(c.get(4, 4), 1);
        assert_eq!(c.get(4, 5), 2);
        assert_eq!(c.get(5, 5), 4);
        assert!(!c.is_uniform_interior(1));
    }

    #[test]
    fn even_stride_two_is_uniform() {
        let t = topo("input 1 12 12\nconv 4 2 1 1\n");
        let c = coverage_counts(&t).unwrap();
        assert!(c.is_uniform_interior(1));
        assert_eq!(c.get(5, 6), 4);
    }
}
