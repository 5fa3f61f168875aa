use rfscope::micro::{
    epochs_to_threshold, find_blocks, generate_micro_dataset, hflip_rgb, train, MicroDatasetConfig, TrainConfig,
    TEMPLATE_RANGE,
};
use rfscope::netspec::{build_graph, ArchSpec, InitPolicy, WeightSource};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn patch_positions_are_uniform() {
    // 23 - 8 + 1 = 16 positions per axis.
    let data = generate_micro_dataset(&MicroDatasetConfig {
        height: 23,
        width: 23,
        train_per_class: 5000,
        test_per_class: 1,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(data.train.len(), 10_000);
    let (mut xs, mut ys) = (vec![0usize; 16], vec![0usize; 16]);
    for s in &data.train.samples {
        xs[s.patch_at.0] += 1;
        ys[s.patch_at.1] += 1;
    }
    for (axis, counts) in [("x", &xs), ("y", &ys)] {
        let p = chi_square_p(counts);
        assert!(p > 1e-3, "{axis} positions look non-uniform: p = {p:e}, {counts:?}");
    }
}

#[test]
fn exactly_one_patch_of_the_label_colour() {
    let data = generate_micro_dataset(&MicroDatasetConfig {
        height: 32,
        width: 40,
        train_per_class: 40,
        test_per_class: 40,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(data.train.class_counts(), [40, 40]);
    assert_eq!(data.test.class_counts(), [40, 40]);
    for split in [&data.train, &data.test] {
        for s in &split.samples {
            let own = data.colors[s.label];
            let other = data.colors[1 - s.label];
            assert_eq!(find_blocks(&s.rgb, 32, 40, data.patch, own), vec![s.patch_at]);
            assert!(find_blocks(&s.rgb, 32, 40, data.patch, other).is_empty());
            let (x0, y0) = s.patch_at;
            for y in 0..32 {
                for x in 0..40 {
                    if (x0..x0 + 8).contains(&x) && (y0..y0 + 8).contains(&y) {
                        continue;
                    }
                    let px = &s.rgb[(y * 40 + x) * 3..(y * 40 + x) * 3 + 3];
                    assert!(px.iter().all(|v| (TEMPLATE_RANGE.0..=TEMPLATE_RANGE.1).contains(v)));
                }
            }
        }
    }
}

#[test]
fn splits_are_seeded_and_disjoint() {
    let cfg = MicroDatasetConfig { height: 24, width: 24, train_per_class: 20, test_per_class: 20, ..Default::default() };
    let a = generate_micro_dataset(&cfg).unwrap();
    assert_eq!(generate_micro_dataset(&cfg).unwrap(), a);
    let b = generate_micro_dataset(&MicroDatasetConfig { seed: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a.train, b.train);
    for t in &a.train.samples {
        assert!(a.test.samples.iter().all(|s| s.rgb != t.rgb));
    }
}

#[test]
fn flipping_twice_is_identity() {
    let data = generate_micro_dataset(&MicroDatasetConfig {
        height: 12,
        width: 17,
        patch: 3,
        train_per_class: 2,
        test_per_class: 1,
        ..Default::default()
    })
    .unwrap();
    let s = &data.train.samples[1];
    let once = hflip_rgb(&s.rgb, 12, 17);
    assert_ne!(once, s.rgb);
    assert_eq!(hflip_rgb(&once, 12, 17), s.rgb);
    let (x0, y0) = s.patch_at;
    assert_eq!(find_blocks(&once, 12, 17, 3, data.colors[1]), vec![(17 - 3 - x0, y0)]);
}

#[test]
fn bad_configs_are_rejected() {
    for cfg in [
        MicroDatasetConfig { patch: 0, ..Default::default() },
        MicroDatasetConfig { height: 4, width: 4, ..Default::default() },
        MicroDatasetConfig { color_b: [0, 0, 0], ..Default::default() },
    ] {
        assert!(generate_micro_dataset(&cfg).is_err());
    }
}

const TINY: &str = "input 3 16 16\nconv 3 1 1 8 @c1\nbn @n1\nrelu\nconv 3 2 1 8 @c2\nbn @n2\nrelu\ngap\nfc 2 @head\n";

fn tiny_data() -> rfscope::micro::MicroDataset {
    generate_micro_dataset(&MicroDatasetConfig {
        height: 16,
        width: 16,
        patch: 4,
        train_per_class: 64,
        test_per_class: 32,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn training_learns_and_is_deterministic() {
    let spec = ArchSpec::parse(TINY).unwrap();
    let data = tiny_data();
    let cfg = TrainConfig { epochs: 12, batch_size: 16, lr: 0.05, seed: 4, ..Default::default() };
    let run = || {
        let mut g = build_graph(&spec, WeightSource::Init(InitPolicy::He { seed: 4 })).unwrap();
        let log = train(&mut g, &data, &cfg).unwrap();
        (g, log)
    };
    let (g1, log1) = run();
    let (g2, log2) = run();
    assert_eq!(g1, g2);
    assert_eq!(log1.records, log2.records);
    assert_eq!(log1.to_csv(), log2.to_csv());

    let first = &log1.records[0];
    let last = log1.records.last().unwrap();
    assert!(last.train_loss < first.train_loss, "{first:?} -> {last:?}");
    assert!(last.test_acc > 0.8, "{:?}", log1.records);
    assert!(epochs_to_threshold(&log1, 0.8) <= 12);
    assert_eq!(last.lr, rfscope::micro::cosine_lr(0.05, 11 * 8, 12 * 8));
}

#[test]
fn weight_decay_only_touches_weights() {
    let spec = ArchSpec::parse(TINY).unwrap();
    let mut g = build_graph(&spec, WeightSource::Init(InitPolicy::He { seed: 0 })).unwrap();
    let log = train(&mut g, &tiny_data(), &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
    assert_eq!(log.decayed, ["c1.weight", "c2.weight", "head.weight"]);
}

#[test]
fn head_must_have_two_logits() {
    let spec = ArchSpec::parse("input 3 16 16\nconv 3 1 1 2\ngap\nfc 3\n").unwrap();
    let mut g = build_graph(&spec, WeightSource::Init(InitPolicy::He { seed: 0 })).unwrap();
    let err = train(&mut g, &tiny_data(), &TrainConfig { epochs: 1, ..Default::default() }).unwrap_err();
    assert!(err.to_string().contains("2-logit"), "{err}");
}
