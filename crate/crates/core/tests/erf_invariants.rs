mod common;

use proptest::prelude::*;
use rfscope::autograd::Reduction;
use rfscope::erf::{accumulate_erf, erf_of_output, image_gradient, ClassMode, ImageSource, Normalization, Target};
use rfscope::netspec::{build_graph, bundled, ArchSpec, InitPolicy, NamedTensor, WeightBundle, WeightSource};
use rfscope::Tensor4;

const SMALL: &str = "input 3 20 20\nconv 3 2 1 4\nbn\nrelu\nmaxpool 3 2 1\nconv 3 1 1 4\nrelu\ngap\nfc 3\n";

fn small_graph(seed: u64) -> rfscope::autograd::NetGraph {
    build_graph(&ArchSpec::parse(SMALL).unwrap(), WeightSource::Init(InitPolicy::He { seed })).unwrap()
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn non_negative_and_order_invariant(seed in any::<u64>(), n in 2usize..90) {
        let g = small_graph(seed);
        let src = ImageSource::synthetic(n, [3, 20, 20], seed ^ 1, Normalization::imagenet()).unwrap();
        let erf = erf_of_output(&g, &src, ClassMode::Mean, 1).unwrap();
        prop_assert!(erf.field.data().iter().all(|&v| v >= 0.0));

        let mut order: Vec<usize> = (0..n).rev().collect();
        order.rotate_left(n / 3);
        let shuffled = erf_of_output(&g, &src.select(&order), ClassMode::Mean, 1).unwrap();
        prop_assert!(close(erf.field.data(), shuffled.field.data(), 1e-12));
    }

    #[test]
    fn additive_over_disjoint_splits(seed in any::<u64>(), n in 2usize..80, cut in 1usize..79) {
        prop_assume!(cut < n);
        let g = small_graph(seed);
        let src = ImageSource::synthetic(n, [3, 20, 20], seed ^ 2, Normalization::imagenet()).unwrap();
        let all = erf_of_output(&g, &src, ClassMode::Index(1), 1).unwrap();
        let a: Vec<usize> = (0..cut).collect();
        let b: Vec<usize> = (cut..n).collect();
        let ea = erf_of_output(&g, &src.select(&a), ClassMode::Index(1), 1).unwrap();
        let eb = erf_of_output(&g, &src.select(&b), ClassMode::Index(1), 1).unwrap();
        let whole: Vec<f64> = all.field.data().iter().map(|v| v * n as f64).collect();
        let parts: Vec<f64> = ea
            .field
            .data()
            .iter()
            .zip(eb.field.data())
            .map(|(x, y)| x * cut as f64 + y * (n - cut) as f64)
            .collect();
        prop_assert!(close(&whole, &parts, 1e-12));
    }
}

#[test]
fn worker_count_does_not_change_bits() {
    let g = small_graph(5);
    let src = ImageSource::synthetic(150, [3, 20, 20], 8, Normalization::imagenet()).unwrap();
    let one = erf_of_output(&g, &src, ClassMode::Mean, 1).unwrap();
    for workers in [2, 3, 7] {
        assert_eq!(erf_of_output(&g, &src, ClassMode::Mean, workers).unwrap(), one);
    }
}

/// Two images with opposite gradients: their average gradient is zero, but
/// rectifying each image first leaves a positive field.
#[test]
fn per_image_rectification_guard() {
    let spec = ArchSpec::parse("input 1 5 5\nconv 3 1 1 2 @a\nrelu\nconv 1 1 0 1 @b\n").unwrap();
    let w: Vec<f64> = vec![0.3, -0.7, 0.2, 0.9, 0.5, -0.4, 0.1, 0.8, -0.6];
    let mut a = w.clone();
    a.extend(w.iter().map(|v| -v));
    let bundle = WeightBundle {
        tensors: vec![
            NamedTensor { name: "a.weight".into(), dims: vec![2, 1, 3, 3], data: a },
            NamedTensor { name: "b.weight".into(), dims: vec![1, 2, 1, 1], data: vec![1.0, 1.0] },
        ],
    };
    let g = build_graph(&spec, WeightSource::Bundle(&bundle)).unwrap();
    let x = Tensor4::from_fn([1, 1, 5, 5], |_, _, y, x| ((y * 5 + x) as f64 * 0.37).sin());
    let neg = x.map(|v| -v);
    let src = ImageSource::from_raw(vec![("x".into(), x), ("-x".into(), neg)], Normalization::identity(1), "pair").unwrap();
    let target = Target { node: 3, reduction: Reduction::CenterChannelMean };

    let g0 = image_gradient(&g, src.get(0), &target).unwrap();
    let g1 = image_gradient(&g, src.get(1), &target).unwrap();
    let batch_mean: Vec<f64> = g0.data().iter().zip(g1.data()).map(|(p, q)| (p + q) / 2.0).collect();
    assert!(batch_mean.iter().all(|&v| v == 0.0), "{batch_mean:?}");

    let erf = accumulate_erf(&g, &src, &target, 1).unwrap();
    assert!(erf.field.sum() > 0.0);
    // Rectified sum of +w and -w is |w| / 2 on the 3x3 footprint.
    for (i, wv) in w.iter().enumerate() {
        let (y, x) = (1 + i / 3, 1 + i % 3);
        assert!((erf.field.get(y, x) - wv.abs() / 2.0).abs() < 1e-15);
    }
}

#[test]
fn feature_target_is_local_to_its_trf() {
    let g = build_graph(&ArchSpec::parse(bundled::MICRO_RESNET).unwrap(), WeightSource::Init(InitPolicy::He { seed: 2 })).unwrap();
    let node = g.topology().find("layer1").unwrap();
    let src = ImageSource::synthetic(4, [3, 64, 64], 1, Normalization::imagenet()).unwrap();
    let erf = accumulate_erf(&g, &src, &Target { node, reduction: Reduction::CenterChannelMean }, 1).unwrap();
    let t = g.topology();
    let info = rfscope::rf::compute_trf(t, node).unwrap();
    // layer1 is 16x16 with jump 4; the centre feature (8, 8) sees rows
    // start + 8 * 4 +- (rf - 1) / 2 and nothing outside.
    let centre = info.start[0] + 8.0 * info.jump[0] as f64;
    let half = (info.rf_size[0] - 1) as f64 / 2.0;
    for y in 0..64 {
        for x in 0..64 {
            let inside = (y as f64 - centre).abs() <= half && (x as f64 - centre).abs() <= half;
            if !inside {
                assert_eq!(erf.field.get(y, x), 0.0, "({y},{x}) outside the TRF");
            }
        }
    }
    assert!(erf.field.max() > 0.0);
}
