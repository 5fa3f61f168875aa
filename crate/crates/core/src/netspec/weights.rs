//! Binary weight bundles.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "RFSW"
//! version    u32      1
//! endianness u8       0 = little
//! count      u32      number of records
//! record*    name_len u32, name (UTF-8), rank u8, dims u32 * rank,
//!            dtype u8 (0 = f64, 1 = f32), payload
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::autograd::{BnParams, NetGraph, NodeKind, Params, Topology};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"RFSW";
pub const VERSION: u32 = 1;
const LITTLE_ENDIAN: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightBundle {
    pub tensors: Vec<NamedTensor>,
}

impl WeightBundle {
    /// Every parameter tensor of `graph`, in node order.
    pub fn from_graph(graph: &NetGraph) -> Self {
        let mut tensors = Vec::new();
        let mut push = |name: String, dims: Vec<usize>, data: &[f64]| {
            tensors.push(NamedTensor { name, dims, data: data.to_vec() });
        };
        for (node, p) in graph.topology().nodes().iter().zip(graph.params()) {
            let n = &node.name;
            match p {
                Params::None => {}
                Params::Conv { weight, bias } => {
                    let s = weight.shape();
                    push(format!("{n}.weight"), vec![s.n, s.c, s.h, s.w], weight.data());
                    if let Some(b) = bias {
                        push(format!("{n}.bias"), vec![b.len()], b);
                    }
                }
                Params::BatchNorm(bn) => {
                    let c = bn.gamma.len();
                    push(format!("{n}.gamma"), vec![c], &bn.gamma);
                    push(format!("{n}.beta"), vec![c], &bn.beta);
                    push(format!("{n}.running_mean"), vec![c], &bn.running_mean);
                    push(format!("{n}.running_var"), vec![c], &bn.running_var);
                }
                Params::Linear { weight, bias } => {
                    push(format!("{n}.weight"), vec![bias.len(), weight.len() / bias.len().max(1)], weight);
                    push(format!("{n}.bias"), vec![bias.len()], bias);
                }
            }
        }
        WeightBundle { tensors }
    }

    /// Parameters for every node of `topo`; errors name the offending layer.
    pub fn to_params(&self, topo: &Topology) -> Result<Vec<Params>> {
        let mut by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != self.tensors.len() {
            return Err(Error::Weights("bundle contains duplicate tensor names".into()));
        }
        let mut take = |layer: &str, field: &str, dims: Vec<usize>| -> Result<Vec<f64>> {
            let key = format!("{layer}.{field}");
            let t = by_name
                .remove(key.as_str())
                .ok_or_else(|| Error::Weights(format!("layer {layer}: missing tensor '{key}'")))?;
            if t.dims != dims {
                return Err(Error::Weights(format!(
                    "layer {layer}: '{key}' has shape {:?}, spec needs {dims:?}",
                    t.dims
                )));
            }
            Ok(t.data.clone())
        };
        let mut params = Vec::with_capacity(topo.len());
        for node in topo.nodes() {
            let n = node.name.as_str();
            params.push(match &node.kind {
                NodeKind::Conv(g) => {
                    let [kh, kw] = g.window.kernel;
                    let w = take(n, "weight", vec![g.out_ch, g.in_ch, kh, kw])?;
                    let weight = Tensor4::from_vec([g.out_ch, g.in_ch, kh, kw], w)?;
                    let bias = if g.bias { Some(take(n, "bias", vec![g.out_ch])?) } else { None };
                    Params::Conv { weight, bias }
                }
                NodeKind::BatchNorm { channels } => {
                    let c = *channels;
                    Params::BatchNorm(BnParams {
                        gamma: take(n, "gamma", vec![c])?,
                        beta: take(n, "beta", vec![c])?,
                        running_mean: take(n, "running_mean", vec![c])?,
                        running_var: take(n, "running_var", vec![c])?,
                    })
                }
                NodeKind::Linear { in_features, out_features } => Params::Linear {
                    weight: take(n, "weight", vec![*out_features, *in_features])?,
                    bias: take(n, "bias", vec![*out_features])?,
                },
                _ => Params::None,
            });
        }
        if let Some(extra) = self.tensors.iter().find(|t| by_name.contains_key(t.name.as_str())) {
            return Err(Error::Weights(format!("tensor '{}' matches no layer of the spec", extra.name)));
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(LITTLE_ENDIAN);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(DType::F64 as u8);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| Error::Weights("bad magic: file too short".into()))?;
        if magic != MAGIC {
            return Err(Error::Weights(format!("bad magic {magic:?}, expected \"RFSW\"")));
        }
        let header_eof = |_| Error::Weights("unexpected EOF in header".into());
        let version = r.u32().map_err(header_eof)?;
        if version != VERSION {
            return Err(Error::Weights(format!("unsupported version {version}, expected {VERSION}")));
        }
        let endian = r.u8().map_err(header_eof)?;
        if endian != LITTLE_ENDIAN {
            return Err(Error::Weights(format!("unsupported endianness flag {endian}")));
        }
        let count = r.u32().map_err(header_eof)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for k in 0..count {
            let eof = |_| Error::Weights(format!("unexpected EOF at layer {k}"));
            let name_len = r.u32().map_err(eof)? as usize;
            let name = String::from_utf8(r.take(name_len).map_err(eof)?.to_vec())
                .map_err(|_| Error::Weights(format!("record {k}: name is not UTF-8")))?;
            let rank = r.u8().map_err(eof)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32().map_err(eof)? as usize);
            }
            let n: usize = dims.iter().product();
            let dtype = r.u8().map_err(eof)?;
            let data = match dtype {
                0 => r
                    .take(n * 8)
                    .map_err(eof)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
                1 => r
                    .take(n * 4)
                    .map_err(eof)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                    .collect(),
                other => return Err(Error::Weights(format!("record '{name}': unknown dtype tag {other}"))),
            };
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Weights(format!("{} trailing bytes after {count} records", bytes.len() - r.pos)));
        }
        Ok(WeightBundle { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, ()> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, ()> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
