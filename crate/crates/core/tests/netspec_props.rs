mod common;

use common::{normal_tensor, random_graph, random_spec, rng, GenOpts};
use proptest::prelude::*;
use rfscope::autograd::{Mode, NodeKind};
use rfscope::netspec::{
    build_graph, bundled, kernel_pad, pad_spec, pad_topology, ArchSpec, InitPolicy, PadRule, WeightBundle, WeightSource,
};
use rfscope::Error;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn print_then_parse_is_identity(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, GenOpts { max_layers: 6, ..Default::default() });
        let text = spec.to_string();
        let back = ArchSpec::parse(&text).unwrap();
        prop_assert_eq!(&back, &spec);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn weights_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, GenOpts::default());
        let g = random_graph(&spec, &mut r);
        let bytes = WeightBundle::from_graph(&g).to_bytes();
        let back = WeightBundle::from_bytes(&bytes).unwrap();
        let g2 = build_graph(&spec, WeightSource::Bundle(&back)).unwrap();
        prop_assert_eq!(g2, g);
    }

    /// Zero-extended kernels compute the same function.
    #[test]
    fn conv_only_padding_is_equivalent(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, GenOpts { max_layers: 5, conv_only: true, ..Default::default() });
        let g = random_graph(&spec, &mut r);
        let (padded, changes) = kernel_pad(&g, &PadRule::default()).unwrap();
        prop_assert!(changes.iter().all(|c| c.equivalent));
        let [c, h, w] = g.input_shape();
        let x = normal_tensor(&mut r, [2, c, h, w]);
        let a = g.forward(&x, Mode::Eval).unwrap();
        let b = padded.forward(&x, Mode::Eval).unwrap();
        prop_assert!(a.output().max_abs_diff(b.output()) <= 1e-12);
    }

    /// The spec-level and graph-level transforms agree.
    #[test]
    fn spec_and_topology_padding_agree(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, GenOpts { max_layers: 6, ..Default::default() });
        let (t, _) = pad_topology(&spec.topology().unwrap(), &PadRule::default()).unwrap();
        prop_assert_eq!(pad_spec(&spec, &PadRule::default()).topology().unwrap(), t);
    }
}

#[test]
fn conv_only_equivalence_over_100_inputs() {
    let spec = ArchSpec::parse(
        "input 3 33 31\nconv 7 2 3 8 bias\nrelu\nconv 3 2 1 8\nresblock {\n  conv 3 2 1 8\n  relu\n  conv 3 1 1 8\n} shortcut {\n  conv 1 2 0 8\n}\nconv 3x1 2x1 1,1,0,0 4\n",
    )
    .unwrap();
    let mut r = rng(17);
    let g = random_graph(&spec, &mut r);
    let (padded, changes) = kernel_pad(&g, &PadRule::default()).unwrap();
    assert_eq!(changes.len(), 5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = normal_tensor(&mut r, [1, 3, 33, 31]);
        let a = g.forward(&x, Mode::Eval).unwrap();
        let b = padded.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.output().shape(), b.output().shape());
        worst = worst.max(a.output().max_abs_diff(b.output()));
    }
    assert!(worst <= 1e-12, "{worst:e}");
}

#[test]
fn pools_are_flagged_non_equivalent() {
    let g = build_graph(
        &ArchSpec::parse("input 1 16 16\nconv 3 1 1 2\nmaxpool 3 2 1\n").unwrap(),
        WeightSource::Init(InitPolicy::He { seed: 0 }),
    )
    .unwrap();
    let (_, changes) = kernel_pad(&g, &PadRule::default()).unwrap();
    assert_eq!(changes.len(), 1);
    assert_eq!(changes[0].op, "maxpool");
    assert!(!changes[0].equivalent);
    assert_eq!(changes[0].to.kernel, [4, 4]);
}

#[test]
fn nothing_to_pad_is_a_no_op() {
    let spec = ArchSpec::parse("input 1 16 16\nconv 3 1 1 2\nconv 4 2 1 2\n").unwrap();
    let g = build_graph(&spec, WeightSource::Init(InitPolicy::He { seed: 3 })).unwrap();
    let (padded, changes) = kernel_pad(&g, &PadRule::default()).unwrap();
    assert!(changes.is_empty());
    assert_eq!(padded, g);
    assert_eq!(pad_spec(&spec, &PadRule::default()), spec);
}

#[test]
fn padded_resnet18_shapes_and_kernels() {
    let spec = ArchSpec::parse(bundled::RESNET18).unwrap();
    let before = spec.topology().unwrap();
    let after = pad_spec(&spec, &PadRule::default()).topology().unwrap();
    for (a, b) in before.nodes().iter().zip(after.nodes()) {
        assert_eq!(a.out, b.out, "{}", a.name);
        if let (Some(wa), Some(wb)) = (a.kind.window(), b.kind.window()) {
            let expect = if wa.stride == [2, 2] { [wa.kernel[0] + 1, wa.kernel[1] + 1] } else { wa.kernel };
            assert_eq!(wb.kernel, expect, "{}", a.name);
        }
    }
    let n_changed = before
        .nodes()
        .iter()
        .filter(|n| n.kind.window().is_some_and(|w| w.stride == [2, 2]) && !matches!(n.kind, NodeKind::Linear { .. }))
        .count();
    // stem conv, max pool, and 3x3 + 1x1 in each of three downsampling stages
    assert_eq!(n_changed, 8);
}

#[test]
fn parse_errors_carry_locations() {
    let cases = [
        ("input 1 8 8\nconv 0 1 0 1\n", 2, "non-positive"),
        ("input 1 8 8\nswish\n", 2, "unknown op"),
        ("input 1 8 8\nresblock {\n conv 3 1 1 1\n", 2, "unclosed resblock"),
        ("input 1 8 8\nrelu\n}\n", 3, "unbalanced"),
        ("input 1 4 4\nconv 7 1 0 1\n", 2, "shape inconsistency"),
        ("input 1 8 8\nresblock {\n conv 3 2 1 1\n}\n", 2, "branches disagree"),
        ("conv 3 1 1 1\n", 1, "input"),
        ("input 1 8 8\nrelu @a\nrelu @a\n", 3, "duplicate layer name"),
    ];
    for (text, line, needle) in cases {
        match ArchSpec::parse(text) {
            Err(Error::Parse { line: l, msg, .. }) => {
                assert_eq!(l, line, "{text:?}: {msg}");
                assert!(msg.contains(needle), "{text:?}: {msg}");
            }
            other => panic!("{text:?}: expected a parse error, got {other:?}"),
        }
    }
}

#[test]
fn weight_errors_name_the_layer() {
    let spec = ArchSpec::parse("input 1 8 8\nconv 3 1 1 2 @c1\nbn @n1\n").unwrap();
    let g = build_graph(&spec, WeightSource::Init(InitPolicy::He { seed: 0 })).unwrap();
    let mut bundle = WeightBundle::from_graph(&g);
    bundle.tensors.retain(|t| t.name != "n1.running_var");
    let err = build_graph(&spec, WeightSource::Bundle(&bundle)).unwrap_err().to_string();
    assert!(err.contains("n1"), "{err}");

    let bytes = WeightBundle::from_graph(&g).to_bytes();
    let err = WeightBundle::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
    assert!(err.contains("unexpected EOF"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(WeightBundle::from_bytes(&bad).unwrap_err().to_string().contains("bad magic"));
}
