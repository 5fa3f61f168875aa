//! Architecture specs, network construction, weight bundles and kernel padding.

mod dsl;
mod pad;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use dsl::{ArchSpec, Layer, LayerOp};
pub use pad::{kernel_pad, pad_spec, pad_topology, zero_extend, PadChange, PadRule};
pub use weights::{DType, NamedTensor, WeightBundle, MAGIC, VERSION};

use crate::autograd::{BnParams, NetGraph, NodeKind, Params, Topology};
use crate::error::Result;
use crate::tensor::Tensor4;

/// Architecture files shipped with the crate.
pub mod bundled {
    pub const RESNET18: &str = include_str!("../../specs/resnet18.spec");
    pub const RESNET34: &str = include_str!("../../specs/resnet34.spec");
    pub const RESNET50: &str = include_str!("../../specs/resnet50.spec");
    pub const RESNET101: &str = include_str!("../../specs/resnet101.spec");
    pub const RESNET152: &str = include_str!("../../specs/resnet152.spec");
    /// Desk-scale 64x64 ResNet with the same stride-2 pattern.
    pub const MICRO_RESNET: &str = include_str!("../../specs/micro-resnet.spec");

    pub fn by_name(name: &str) -> Option<&'static str> {
        Some(match name {
            "resnet18" => RESNET18,
            "resnet34" => RESNET34,
            "resnet50" => RESNET50,
            "resnet101" => RESNET101,
            "resnet152" => RESNET152,
            "micro-resnet" => MICRO_RESNET,
            _ => return None,
        })
    }
}

/// Parameter initialisation for networks trained from scratch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicy {
    /// Conv/fc weights ~ N(0, 2 / fan_in), zero biases, identity batch norm.
    He { seed: u64 },
}

pub enum WeightSource<'a> {
    Bundle(&'a WeightBundle),
    Init(InitPolicy),
}

pub fn build_graph(spec: &ArchSpec, weights: WeightSource<'_>) -> Result<NetGraph> {
    let topo = spec.topology()?;
    let params = match weights {
        WeightSource::Bundle(b) => b.to_params(&topo)?,
        WeightSource::Init(policy) => init_params(&topo, policy),
    };
    NetGraph::new(topo, params)
}

pub fn init_params(topo: &Topology, policy: InitPolicy) -> Vec<Params> {
    let InitPolicy::He { seed } = policy;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |fan_in: usize, n: usize| -> Vec<f64> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    };
    topo.nodes()
        .iter()
        .map(|node| match &node.kind {
            NodeKind::Conv(g) => {
                let [kh, kw] = g.window.kernel;
                let fan_in = g.in_ch * kh * kw;
                let w = he(fan_in, g.out_ch * fan_in);
                Params::Conv {
                    weight: Tensor4::from_vec([g.out_ch, g.in_ch, kh, kw], w).expect("sized above"),
                    bias: g.bias.then(|| vec![0.0; g.out_ch]),
                }
            }
            NodeKind::BatchNorm { channels } => Params::BatchNorm(BnParams::identity(*channels)),
            NodeKind::Linear { in_features, out_features } => Params::Linear {
                weight: he(*in_features, in_features * out_features),
                bias: vec![0.0; *out_features],
            },
            _ => Params::None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_specs_parse() {
        for name in ["resnet18", "resnet34", "resnet50", "resnet101", "resnet152", "micro-resnet"] {
            let spec = ArchSpec::parse(bundled::by_name(name).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(spec.name, name);
        }
    }

    #[test]
    fn init_is_seeded() {
        let spec = ArchSpec::parse(bundled::MICRO_RESNET).unwrap();
        let a = build_graph(&spec, WeightSource::Init(InitPolicy::He { seed: 1 })).unwrap();
        let b = build_graph(&spec, WeightSource::Init(InitPolicy::He { seed: 1 })).unwrap();
        let c = build_graph(&spec, WeightSource::Init(InitPolicy::He { seed: 2 })).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
