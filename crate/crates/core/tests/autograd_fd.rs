//! Central-difference checks of every gradient the graph produces.

mod common;

use common::{max_rel_error, normal_tensor, random_graph, random_spec, rng, GenOpts};
use rfscope::autograd::{Mode, NodeKind};
use rfscope::netspec::ArchSpec;

fn kinds(spec: &ArchSpec) -> Vec<&'static str> {
    spec.topology().unwrap().nodes().iter().map(|n| n.kind.label()).collect()
}

#[test]
fn random_nets_all_ops_both_modes() {
    let mut seen = std::collections::BTreeSet::new();
    let mut worst = 0.0f64;
    for seed in 0..60u64 {
        let mut r = rng(seed);
        let spec = random_spec(&mut r, GenOpts::default());
        let mut g = random_graph(&spec, &mut r);
        let [c, h, w] = g.input_shape();
        let x = normal_tensor(&mut r, [3, c, h, w]);
        for mode in [Mode::Eval, Mode::Train] {
            let err = max_rel_error(&mut g, &x, mode, seed);
            assert!(err < 1e-5, "seed {seed} {mode:?}: rel error {err:e}\n{spec}");
            worst = worst.max(err);
        }
        seen.extend(kinds(&spec));
    }
    for op in ["conv", "maxpool", "avgpool", "relu", "bn", "add", "gap", "fc"] {
        assert!(seen.contains(op), "random nets never produced {op}: {seen:?}");
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn asymmetric_padding_and_rectangular_kernels() {
    let spec = ArchSpec::parse("input 2 7 6\nconv 3x2 2x1 0,2,1,0 3 bias\nmaxpool 2x3 1x2 1,0,0,2\navgpool 3 1 0,1,1,0\nfc 2\n").unwrap();
    let mut r = rng(9);
    let mut g = random_graph(&spec, &mut r);
    let x = normal_tensor(&mut r, [2, 2, 7, 6]);
    assert!(max_rel_error(&mut g, &x, Mode::Eval, 1) < 1e-5);
}

#[test]
fn shared_parent_gradients_accumulate() {
    let spec = ArchSpec::parse("input 2 6 6\nconv 3 1 1 2\nresblock {\n  bn\n  relu\n}\nresblock {\n  conv 1 1 0 2\n}\n").unwrap();
    assert!(spec.topology().unwrap().nodes().iter().any(|n| matches!(n.kind, NodeKind::Add)));
    let mut r = rng(4);
    let mut g = random_graph(&spec, &mut r);
    let x = normal_tensor(&mut r, [2, 2, 6, 6]);
    for mode in [Mode::Eval, Mode::Train] {
        assert!(max_rel_error(&mut g, &x, mode, 2) < 1e-5);
    }
}
