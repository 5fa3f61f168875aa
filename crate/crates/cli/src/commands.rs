use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use rfscope::autograd::{Mode, NetGraph, Reduction};
use rfscope::erf::{accumulate_erf, output_target, sha256_hex, ClassMode, ImageSource, Normalization, Target};
use rfscope::field::Field;
use rfscope::metrics::{fit_gaussian, imbalance};
use rfscope::micro::{self, MicroDatasetConfig, TrainConfig};
use rfscope::netspec::{bundled, build_graph, kernel_pad, pad_spec, ArchSpec, InitPolicy, PadRule, WeightBundle, WeightSource};
use rfscope::rf::{coverage_counts, trf_all};
use rfscope::{parallel, Tensor4};

use crate::args::{Command, NormArg};
use crate::manifest::{Recorder, RunManifest};
use crate::usage;

pub fn run(command: &Command, out_dir: &Path) -> Result<RunManifest> {
    let mut rec = Recorder::new(out_dir.to_path_buf())?;
    match command {
        Command::Trf { spec, node } => trf(&mut rec, spec, node)?,
        Command::Coverage { spec, node } => coverage(&mut rec, spec, node.as_deref())?,
        Command::Init { spec, seed, out } => {
            let (arch, _) = load_spec(&mut rec, spec)?;
            let graph = build_graph(&arch, WeightSource::Init(InitPolicy::He { seed: *seed }))?;
            rec.write(out, WeightBundle::from_graph(&graph).to_bytes())?;
            println!("wrote {}", out_dir.join(out).display());
        }
        Command::Erf { spec, weights, images, synthetic, seed, target, class, norm } => {
            erf(&mut rec, spec, weights.as_deref(), images.as_deref(), *synthetic, *seed, target, class, *norm)?
        }
        Command::Fit { erf } => {
            let field = read_field(&mut rec, erf)?;
            let fit = fit_gaussian(&field).with_context(|| format!("fitting {}", erf.display()))?;
            let text = serde_json::to_string_pretty(&fit)? + "\n";
            rec.write("fit.json", &text)?;
            print!("{text}");
        }
        Command::Imbalance { erf, normalize } => {
            let field = read_field(&mut rec, erf)?;
            let ix = imbalance(&field, *normalize)?;
            let text = serde_json::to_string_pretty(&ix)? + "\n";
            rec.write("imbalance.json", &text)?;
            print!("{text}");
        }
        Command::Pad { spec, weights, seed, out_prefix, probes } => {
            pad(&mut rec, spec, weights.as_deref(), *seed, out_prefix, *probes)?
        }
        Command::Micro { config, epochs, seeds } => micro_run(&mut rec, config, *epochs, *seeds)?,
        Command::MicroData { config, seed } => micro_data(&mut rec, config, *seed)?,
        Command::Replay { .. } => bail!("replay cannot be nested"),
    }
    rec.finish(command, command.seed())
}

pub fn replay(manifest_path: &Path, out_dir: &Path, check: bool) -> Result<()> {
    let recorded = RunManifest::load(manifest_path)?;
    for input in &recorded.inputs {
        if input.path.starts_with("bundled:") {
            continue;
        }
        let bytes = std::fs::read(&input.path).with_context(|| format!("reading recorded input {}", input.path))?;
        if sha256_hex(&bytes) != input.sha256 {
            bail!("input {} ({}) changed since the manifest was written", input.path, input.role);
        }
    }
    let fresh = run(&recorded.command, out_dir)?;
    if check {
        let mismatched: Vec<&str> = recorded
            .outputs
            .iter()
            .filter(|o| !fresh.outputs.iter().any(|f| f.path == o.path && f.sha256 == o.sha256))
            .map(|o| o.path.as_str())
            .collect();
        if !mismatched.is_empty() || fresh.outputs.len() != recorded.outputs.len() {
            bail!("replay differs from the manifest: {}", mismatched.join(", "));
        }
        eprintln!("replay matches: {} outputs identical", fresh.outputs.len());
    }
    Ok(())
}

fn load_spec(rec: &mut Recorder, spec: &str) -> Result<(ArchSpec, String)> {
    let (text, label) = if Path::new(spec).is_file() {
        let text = std::fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?;
        rec.input("spec", spec, text.as_bytes());
        (text, spec.to_string())
    } else if let Some(text) = bundled::by_name(spec) {
        rec.input("spec", format!("bundled:{spec}"), text.as_bytes());
        (text.to_string(), format!("{spec}.spec"))
    } else {
        return Err(usage(format!("no spec file or bundled spec named '{spec}'")));
    };
    let arch = ArchSpec::parse(&text).map_err(|e| usage(format!("{label}:{e}")))?;
    Ok((arch, text))
}

fn load_graph(rec: &mut Recorder, arch: &ArchSpec, weights: Option<&Path>, seed: u64) -> Result<(NetGraph, Option<Vec<u8>>)> {
    match weights {
        Some(path) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            rec.input("weights", path.to_string_lossy(), &bytes);
            let bundle = WeightBundle::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
            let graph = build_graph(arch, WeightSource::Bundle(&bundle)).with_context(|| format!("applying {}", path.display()))?;
            Ok((graph, Some(bytes)))
        }
        None => Ok((build_graph(arch, WeightSource::Init(InitPolicy::He { seed }))?, None)),
    }
}

fn read_field(rec: &mut Recorder, path: &Path) -> Result<Field> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    rec.input("field", path.to_string_lossy(), &bytes);
    let text = String::from_utf8(bytes).map_err(|_| usage(format!("{}: not UTF-8 text", path.display())))?;
    Field::from_csv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn trf(rec: &mut Recorder, spec: &str, wanted: &[String]) -> Result<()> {
    let (arch, _) = load_spec(rec, spec)?;
    let topo = arch.topology()?;
    let infos = trf_all(&topo)?;
    let mut picked: Vec<usize> = Vec::new();
    for name in wanted {
        picked.push(topo.find(name).ok_or_else(|| usage(format!("no node named '{name}' in {}", arch.name)))?);
    }
    if picked.is_empty() {
        picked = (0..topo.len()).collect();
    }
    let mut table = format!("{:<24} {:<8} {:>11} {:>9}\n", "node", "op", "trf", "jump");
    let mut rows = Vec::new();
    for &i in &picked {
        let (node, info) = (&topo.nodes()[i], &infos[i]);
        let _ = writeln!(
            table,
            "{:<24} {:<8} {:>11} {:>9}",
            node.name,
            node.kind.label(),
            extent(info.rf_size),
            extent(info.jump)
        );
        rows.push(json!({
            "name": node.name,
            "op": node.kind.label(),
            "rf_size": info.rf_size,
            "jump": info.jump,
            "start": info.start,
        }));
    }
    let last = topo.last_spatial();
    let report = json!({
        "spec": arch.name,
        "last_spatial": { "name": topo.nodes()[last].name, "rf_size": infos[last].rf_size },
        "nodes": rows,
    });
    rec.write("trf.json", serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{table}");
    println!("{}: TRF {} at {}", arch.name, extent(infos[last].rf_size), topo.nodes()[last].name);
    Ok(())
}

fn extent([h, w]: [usize; 2]) -> String {
    if h == w {
        h.to_string()
    } else {
        format!("{h}x{w}")
    }
}

fn coverage(rec: &mut Recorder, spec: &str, node: Option<&str>) -> Result<()> {
    let (arch, _) = load_spec(rec, spec)?;
    let mut topo = arch.topology()?;
    if let Some(name) = node {
        let i = topo.find(name).ok_or_else(|| usage(format!("no node named '{name}' in {}", arch.name)))?;
        if !topo.nodes()[i].kind.is_spatial() && i != 0 {
            return Err(usage(format!("node '{name}' is not spatial")));
        }
        topo = topo.truncate_to(i)?;
    }
    let last = topo.last_spatial();
    let map = coverage_counts(&topo)?;
    let margin = trf_all(&topo)?[last].rf_size.into_iter().max().unwrap_or(0);
    let mut csv = String::new();
    for y in 0..map.h {
        let row: Vec<String> = (0..map.w).map(|x| map.get(y, x).to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    rec.write("coverage.csv", csv)?;
    let field = map.to_field();
    let pgm = rfscope::pnm::encode_pgm16(field.width(), field.height(), &field.to_gray16());
    rec.write("coverage.pgm", pgm)?;
    let uniform = map.is_uniform_interior(margin);
    let report = json!({
        "spec": arch.name,
        "node": topo.nodes()[last].name,
        "height": map.h,
        "width": map.w,
        "min": map.counts.iter().min().map(|v| v.to_string()),
        "max": map.counts.iter().max().map(|v| v.to_string()),
        "interior_margin": margin,
        "uniform_interior": uniform,
    });
    rec.write("coverage.json", serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{} at {}: {}x{} map, interior {}",
        arch.name,
        topo.nodes()[last].name,
        map.h,
        map.w,
        if uniform { "uniform" } else { "non-uniform (checkerboard)" }
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn erf(
    rec: &mut Recorder,
    spec: &str,
    weights: Option<&Path>,
    images: Option<&Path>,
    synthetic: Option<usize>,
    seed: u64,
    target: &str,
    class: &str,
    norm: NormArg,
) -> Result<()> {
    let (arch, spec_text) = load_spec(rec, spec)?;
    let (graph, weight_bytes) = load_graph(rec, &arch, weights, seed)?;
    let [c, h, w] = graph.input_shape();
    let norm = match norm {
        NormArg::Imagenet => Normalization::imagenet(),
        NormArg::None => Normalization::identity(c),
    };
    let source = match (images, synthetic) {
        (Some(path), _) => {
            let src = ImageSource::load(path, norm)?;
            rec.input("images", path.to_string_lossy(), src.id().as_bytes());
            src
        }
        (None, Some(n)) => ImageSource::synthetic(n, [c, h, w], seed, norm)?,
        (None, None) => return Err(usage("one of --images or --synthetic is required")),
    };
    if source.shape() != [c, h, w] {
        let [sc, sh, sw] = source.shape();
        return Err(usage(format!("images are {sc}x{sh}x{sw} but {} expects {c}x{h}x{w}", arch.name)));
    }
    let target = if target == "output" {
        let mode = match class {
            "mean" => ClassMode::Mean,
            k => ClassMode::Index(k.parse().map_err(|_| usage(format!("--class must be an index or 'mean', got '{k}'")))?),
        };
        output_target(&graph, mode)?
    } else {
        if class != "mean" {
            return Err(usage("--class applies only to --target output"));
        }
        let node = graph
            .topology()
            .find(target)
            .ok_or_else(|| usage(format!("no node named '{target}' in {}", arch.name)))?;
        Target { node, reduction: Reduction::CenterChannelMean }
    };
    let mut map = accumulate_erf(&graph, &source, &target, parallel::default_workers())?;
    map.provenance.spec_sha256 = Some(sha256_hex(spec_text.as_bytes()));
    map.provenance.weights_sha256 = weight_bytes.as_deref().map(sha256_hex);
    rec.write("erf.csv", map.field.to_csv())?;
    let pgm = rfscope::pnm::encode_pgm16(map.field.width(), map.field.height(), &map.field.to_gray16());
    rec.write("erf.pgm", pgm)?;
    rec.write("erf.json", map.sidecar_json() + "\n")?;
    println!(
        "ERF of {} ({}) over {} images: {}x{}, max {:e}",
        map.target.node,
        map.target.reduction,
        map.n_images,
        map.field.height(),
        map.field.width(),
        map.field.max()
    );
    Ok(())
}

fn pad(rec: &mut Recorder, spec: &str, weights: Option<&Path>, seed: u64, prefix: &str, probes: usize) -> Result<()> {
    let (arch, spec_text) = load_spec(rec, spec)?;
    let (graph, weight_bytes) = load_graph(rec, &arch, weights, seed)?;
    let rule = PadRule::default();
    let (padded, changes) = kernel_pad(&graph, &rule)?;
    let padded_spec = pad_spec(&arch, &rule);
    if padded_spec.topology()? != *padded.topology() {
        bail!("internal error: padded spec and padded graph disagree");
    }

    let spec_out = format!("{prefix}.spec");
    let weights_out = format!("{prefix}.rfsw");
    if changes.is_empty() {
        rec.write(&spec_out, &spec_text)?;
    } else {
        rec.write(&spec_out, padded_spec.to_string())?;
    }
    match (&weight_bytes, changes.is_empty()) {
        (Some(bytes), true) => rec.write(&weights_out, bytes)?,
        _ => rec.write(&weights_out, WeightBundle::from_graph(&padded).to_bytes())?,
    };

    // Max output deviation over random probes.
    let [c, h, w] = graph.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deviation = 0.0f64;
    for _ in 0..probes {
        let x = Tensor4::from_fn([1, c, h, w], |_, _, _, _| StandardNormal.sample(&mut rng));
        let a = graph.forward(&x, Mode::Eval)?;
        let b = padded.forward(&x, Mode::Eval)?;
        deviation = deviation.max(a.output().max_abs_diff(b.output()));
    }
    let all_equivalent = changes.iter().all(|c| c.equivalent);
    let layers: Vec<_> = changes
        .iter()
        .map(|c| {
            json!({
                "name": c.name,
                "op": c.op,
                "from": { "kernel": c.from.kernel, "stride": c.from.stride, "padding": c.from.padding },
                "to": { "kernel": c.to.kernel, "stride": c.to.stride, "padding": c.to.padding },
                "equivalent": c.equivalent,
                "note": if c.equivalent { "zero-extended weights" } else { "non-equivalent replacement" },
            })
        })
        .collect();
    let summary = format!("{} layers modified", changes.len());
    let report = json!({
        "spec": arch.name,
        "summary": summary,
        "modified": changes.len(),
        "layers": layers,
        "probes": probes,
        "max_deviation": deviation,
        "equivalent": all_equivalent,
    });
    rec.write(&format!("{prefix}.report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{summary}; max output deviation over {probes} probes: {deviation:e}");
    for c in changes.iter().filter(|c| !c.equivalent) {
        println!("  {} ({}): non-equivalent replacement", c.name, c.op);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Variant {
    Baseline,
    Padded,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Padded => "padded",
        }
    }
}

/// The `micro` config file. Relative paths are taken from the file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MicroConfig {
    #[serde(default = "default_spec")]
    spec: String,
    #[serde(default)]
    dataset: MicroDatasetConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_threshold")]
    threshold: f64,
    #[serde(default = "default_variants")]
    variants: Vec<Variant>,
}

fn default_spec() -> String {
    "micro-resnet".into()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_threshold() -> f64 {
    0.9
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Baseline, Variant::Padded]
}

fn load_micro_config(rec: &mut Recorder, path: &Path) -> Result<(MicroConfig, ArchSpec)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    rec.input("config", path.to_string_lossy(), &bytes);
    let mut cfg: MicroConfig =
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if bundled::by_name(&cfg.spec).is_none() {
        cfg.spec = base.join(&cfg.spec).to_string_lossy().into_owned();
    }
    if let micro::TemplateSource::Dir(dir) = &mut cfg.dataset.templates {
        *dir = base.join(&*dir);
    }
    if !(0.0..1.0).contains(&cfg.threshold) {
        return Err(usage(format!("threshold {} outside [0, 1)", cfg.threshold)));
    }
    let (arch, _) = load_spec(rec, &cfg.spec.clone())?;
    Ok((cfg, arch))
}

fn micro_run(rec: &mut Recorder, path: &Path, epochs: Option<usize>, seeds: Option<usize>) -> Result<()> {
    let (mut cfg, arch) = load_micro_config(rec, path)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = seeds {
        cfg.seeds.truncate(n);
    }
    if cfg.seeds.is_empty() || cfg.train.epochs == 0 {
        return Err(usage("need at least one seed and one epoch"));
    }
    let padded = pad_spec(&arch, &PadRule::default());
    let mut per_variant: Vec<Vec<usize>> = vec![Vec::new(); cfg.variants.len()];
    for &seed in &cfg.seeds {
        let data = micro::generate_micro_dataset(&MicroDatasetConfig { seed, ..cfg.dataset.clone() })?;
        for (vi, &variant) in cfg.variants.iter().enumerate() {
            let spec = if variant == Variant::Padded { &padded } else { &arch };
            let mut graph = build_graph(spec, WeightSource::Init(InitPolicy::He { seed }))?;
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let mut log = micro::train(&mut graph, &data, &train_cfg)
                .with_context(|| format!("training {} seed {seed}", variant.name()))?;
            let stem = format!("{}/seed{seed}", variant.name());
            let weights = format!("{stem}.rfsw");
            rec.write(&weights, WeightBundle::from_graph(&graph).to_bytes())?;
            log.weights = Some(weights);
            let e = micro::epochs_to_threshold(&log, cfg.threshold);
            per_variant[vi].push(e);
            rec.write(&format!("{stem}.csv"), log.to_csv())?;
            let snapshot = json!({
                "variant": variant.name(),
                "seed": seed,
                "dataset": MicroDatasetConfig { seed, ..cfg.dataset.clone() },
                "config": log.config,
                "weight_decay_on": log.decayed,
                "weights": log.weights,
                "threshold": cfg.threshold,
                "epochs_to_threshold": e,
            });
            rec.write(&format!("{stem}.json"), serde_json::to_string_pretty(&snapshot)? + "\n")?;
            let last = log.records.last().expect("at least one epoch");
            eprintln!(
                "{} seed {seed}: epochs to {:.0}% = {e}, final test acc {:.3} ({:.1}s)",
                variant.name(),
                cfg.threshold * 100.0,
                last.test_acc,
                log.wall_time_s
            );
        }
    }
    let variants: Vec<_> = cfg
        .variants
        .iter()
        .zip(&per_variant)
        .map(|(v, e)| json!({ "name": v.name(), "epochs_to_threshold": e, "median": median(e), "mean": mean(e) }))
        .collect();
    let summary = json!({
        "threshold": cfg.threshold,
        "max_epochs": cfg.train.epochs,
        "seeds": cfg.seeds,
        "variants": variants,
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    rec.write("summary.json", &text)?;
    print!("{text}");
    Ok(())
}

fn median(v: &[usize]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    match s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => s[n / 2] as f64,
        n => (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0,
    }
}

fn mean(v: &[usize]) -> f64 {
    v.iter().sum::<usize>() as f64 / v.len() as f64
}

fn micro_data(rec: &mut Recorder, path: &Path, seed: u64) -> Result<()> {
    let (cfg, _) = load_micro_config(rec, path)?;
    let data = micro::generate_micro_dataset(&MicroDatasetConfig { seed, ..cfg.dataset })?;
    let dir = rec.out_dir.join("dataset");
    data.export(&dir)?;
    let mut files: Vec<PathBuf> = Vec::new();
    for split in ["train", "test"] {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir.join(split))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        names.sort();
        files.extend(names);
    }
    files.push(dir.join("labels.csv"));
    for f in files {
        let rel = f.strip_prefix(&rec.out_dir).map_err(|_| anyhow!("export escaped the output directory"))?;
        rec.wrote(&rel.to_string_lossy());
    }
    println!(
        "wrote {} train and {} test images to {}",
        data.train.len(),
        data.test.len(),
        dir.display()
    );
    Ok(())
}
