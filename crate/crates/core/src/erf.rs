//! Effective receptive fields.
//!
//! For each image, the target scalar `F` is differentiated w.r.t. the input,
//! the gradient is averaged over input channels to give `G`, and `max(G, 0)`
//! is accumulated. Rectification happens per image, before averaging over
//! the dataset; rectifying a batch-averaged gradient would let opposite-sign
//! contributions cancel.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{input_gradient, Chw, Mode, NetGraph, Reduction};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::netspec::WeightBundle;
use crate::parallel;
use crate::pnm;
use crate::tensor::Tensor4;

/// Per-channel `(x - mean) / std` applied to `[0, 1]` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn imagenet() -> Self {
        Normalization { mean: vec![0.485, 0.456, 0.406], std: vec![0.229, 0.224, 0.225] }
    }

    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::InvalidArgument(format!(
                "normalization has {}/{} constants for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument("normalization std must be positive".into()));
        }
        Ok(())
    }

    /// Normalises a 1xCxHxW tensor in place.
    pub fn apply(&self, t: &mut Tensor4) {
        let s = t.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let off = s.offset(n, c, 0, 0);
                let (m, sd) = (self.mean[c], self.std[c]);
                t.data_mut()[off..off + s.plane()].iter_mut().for_each(|v| *v = (*v - m) / sd);
            }
        }
    }
}

/// An ordered set of same-shaped, normalised images.
#[derive(Debug, Clone)]
pub struct ImageSource {
    images: Vec<Tensor4>,
    names: Vec<String>,
    shape: Chw,
    norm: Normalization,
    id: String,
}

impl ImageSource {
    /// Builds a source from raw `[0, 1]` images (each 1xCxHxW).
    pub fn from_raw(raw: Vec<(String, Tensor4)>, norm: Normalization, id: impl Into<String>) -> Result<Self> {
        let first = raw.first().ok_or_else(|| Error::InvalidArgument("image source is empty".into()))?;
        let s0 = first.1.shape();
        let shape = [s0.c, s0.h, s0.w];
        norm.check(s0.c)?;
        let mut images = Vec::with_capacity(raw.len());
        let mut names = Vec::with_capacity(raw.len());
        for (name, mut t) in raw {
            let s = t.shape();
            if s.n != 1 || [s.c, s.h, s.w] != shape {
                return Err(Error::InvalidArgument(format!(
                    "image '{name}' has shape {s}, expected 1x{}x{}x{}",
                    shape[0], shape[1], shape[2]
                )));
            }
            norm.apply(&mut t);
            images.push(t);
            names.push(name);
        }
        Ok(ImageSource { images, names, shape, norm, id: id.into() })
    }

    /// Uniform-noise images, reproducible from `seed`.
    pub fn synthetic(n: usize, shape: Chw, seed: u64, norm: Normalization) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = (0..n)
            .map(|i| {
                let t = Tensor4::from_fn([1, shape[0], shape[1], shape[2]], |_, _, _, _| rng.random::<f64>());
                (format!("synthetic-{i:05}"), t)
            })
            .collect();
        let id = format!("synthetic:n={n},seed={seed},shape={}x{}x{}", shape[0], shape[1], shape[2]);
        Self::from_raw(raw, norm, id)
    }

    /// Loads every `.ppm` file of `dir` in lexicographic filename order, or
    /// a weight-bundle file holding a rank-4 tensor named `images`.
    pub fn load(path: impl AsRef<Path>, norm: Normalization) -> Result<Self> {
        let path = path.as_ref();
        let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
        if meta.is_file() {
            return Self::load_tensor_file(path, norm);
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::format(path, "no .ppm images in directory"));
        }
        let mut raw = Vec::with_capacity(files.len());
        let mut first: Option<(usize, usize, PathBuf)> = None;
        for f in &files {
            let img = pnm::read_ppm(f)?;
            match &first {
                None => first = Some((img.width, img.height, f.clone())),
                Some((w, h, p)) if (*w, *h) != (img.width, img.height) => {
                    return Err(Error::format(
                        f,
                        format!("image is {}x{} but {} is {w}x{h}", img.width, img.height, p.display()),
                    ));
                }
                _ => {}
            }
            let (w, h) = (img.width, img.height);
            let t = Tensor4::from_fn([1, 3, h, w], |_, c, y, x| img.data[(y * w + x) * 3 + c]);
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            raw.push((name, t));
        }
        Self::from_raw(raw, norm, format!("dir:{}", path.display()))
    }

    fn load_tensor_file(path: &Path, norm: Normalization) -> Result<Self> {
        let bundle = WeightBundle::load(path)?;
        let t = bundle
            .tensors
            .iter()
            .find(|t| t.name == "images" && t.dims.len() == 4)
            .ok_or_else(|| Error::format(path, "no rank-4 tensor named 'images'"))?;
        let all = Tensor4::from_vec([t.dims[0], t.dims[1], t.dims[2], t.dims[3]], t.data.clone())?;
        let raw = (0..t.dims[0]).map(|i| (format!("images[{i}]"), all.batch_item(i))).collect();
        Self::from_raw(raw, norm, format!("tensor:{}", path.display()))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Normalised image `i` as a 1xCxHxW tensor.
    pub fn get(&self, i: usize) -> &Tensor4 {
        &self.images[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self) -> Chw {
        self.shape
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// The images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageSource {
        ImageSource {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            shape: self.shape,
            norm: self.norm.clone(),
            id: format!("{}[subset of {}]", self.id, indices.len()),
        }
    }
}

/// Which scalar of the network the field is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub node: usize,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetDescriptor {
    pub node: String,
    pub reduction: Reduction,
    /// Feature-map position used by the centre reduction.
    pub center: Option<[usize; 2]>,
    pub feature_hw: [usize; 2],
}

impl TargetDescriptor {
    pub fn of(graph: &NetGraph, target: &Target) -> Result<Self> {
        let node = graph
            .topology()
            .nodes()
            .get(target.node)
            .ok_or_else(|| Error::InvalidArgument(format!("target node {} out of range", target.node)))?;
        let [_, h, w] = node.out;
        let center = (target.reduction == Reduction::CenterChannelMean).then(|| {
            let (cy, cx) = Reduction::center(h, w);
            [cy, cx]
        });
        Ok(TargetDescriptor { node: node.name.clone(), reduction: target.reduction, center, feature_hw: [h, w] })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_sha256: Option<String>,
    pub weights_sha256: Option<String>,
    pub dataset: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Accumulated, rectified input-gradient field `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub field: Field,
    pub n_images: usize,
    pub target: TargetDescriptor,
    pub provenance: Provenance,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    height: usize,
    width: usize,
    n_images: usize,
    target: &'a TargetDescriptor,
    provenance: &'a Provenance,
    max: f64,
    sum: f64,
}

impl ErfMap {
    pub fn sidecar_json(&self) -> String {
        let s = Sidecar {
            height: self.field.height(),
            width: self.field.width(),
            n_images: self.n_images,
            target: &self.target,
            provenance: &self.provenance,
            max: self.field.max(),
            sum: self.field.sum(),
        };
        serde_json::to_string_pretty(&s).expect("sidecar serializes")
    }
}

/// `G_xy`: the input gradient of the target scalar averaged over input
/// channels. May be negative.
pub fn image_gradient(graph: &NetGraph, image: &Tensor4, target: &Target) -> Result<Field> {
    let nodes = graph.topology().nodes();
    let node = nodes
        .get(target.node)
        .ok_or_else(|| Error::InvalidArgument(format!("target node {} out of range", target.node)))?;
    if image.shape().n != 1 {
        return Err(Error::InvalidArgument(format!("image_gradient takes one image, got batch {}", image.shape().n)));
    }
    if target.reduction == Reduction::CenterChannelMean && (node.out[1] == 0 || node.out[2] == 0) {
        return Err(Error::shape(&node.name, "feature map too small for a centre feature"));
    }
    let (_, grads) = input_gradient(graph, image, target.node, target.reduction, Mode::Eval)?;
    Ok(channel_mean(&grads.input))
}

/// Mean over channels of a 1xCxHxW tensor.
pub fn channel_mean(t: &Tensor4) -> Field {
    let s = t.shape();
    let inv = 1.0 / s.c as f64;
    Field::from_fn(s.h, s.w, |y, x| (0..s.c).map(|c| t[[0, c, y, x]]).sum::<f64>() * inv)
}

/// Images per partial sum. Fixed so the summation tree depends only on
/// image indices, never on the worker count.
const CHUNK: usize = 64;

pub fn accumulate_erf(graph: &NetGraph, source: &ImageSource, target: &Target, workers: usize) -> Result<ErfMap> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("cannot accumulate over an empty image source".into()));
    }
    let [_, h, w] = source.shape();
    let mut partials = Vec::new();
    for start in (0..source.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(source.len());
        let rectified = parallel::map_indexed(end - start, workers, |i| {
            let g = image_gradient(graph, source.get(start + i), target)?;
            Ok(g.data().iter().map(|&v| v.max(0.0)).collect::<Vec<f64>>())
        })?;
        partials.push(parallel::pairwise_sum(rectified).expect("chunk is nonempty"));
    }
    let total = parallel::pairwise_sum(partials).expect("at least one chunk");
    let inv_n = 1.0 / source.len() as f64;
    let field = Field::from_vec(h, w, total.into_iter().map(|v| v * inv_n).collect())?;
    Ok(ErfMap {
        field,
        n_images: source.len(),
        target: TargetDescriptor::of(graph, target)?,
        provenance: Provenance { dataset: source.id().to_string(), ..Default::default() },
    })
}

/// Which logit the output field is taken for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassMode {
    Mean,
    Index(usize),
}

impl ClassMode {
    pub fn reduction(self) -> Reduction {
        match self {
            ClassMode::Mean => Reduction::LogitMean,
            ClassMode::Index(k) => Reduction::LogitIndex(k),
        }
    }
}

/// Target for the logits at the graph output; errors unless the output is
/// a logit vector.
pub fn output_target(graph: &NetGraph, class: ClassMode) -> Result<Target> {
    let topo = graph.topology();
    let out = &topo.nodes()[topo.output()];
    let [k, h, w] = out.out;
    if (h, w) != (1, 1) {
        return Err(Error::shape(&out.name, format!("output is {k}x{h}x{w}, not a logit vector")));
    }
    if let ClassMode::Index(i) = class {
        if i >= k {
            return Err(Error::InvalidArgument(format!("class index {i} out of range for {k} logits")));
        }
    }
    Ok(Target { node: topo.output(), reduction: class.reduction() })
}

/// Effective receptive field of the network output (the dead-pixel test).
pub fn erf_of_output(graph: &NetGraph, source: &ImageSource, class: ClassMode, workers: usize) -> Result<ErfMap> {
    let target = output_target(graph, class)?;
    accumulate_erf(graph, source, &target, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{build_graph, ArchSpec, InitPolicy, WeightSource};

    fn graph(text: &str, seed: u64) -> NetGraph {
        build_graph(&ArchSpec::parse(text).unwrap(), WeightSource::Init(InitPolicy::He { seed })).unwrap()
    }

    #[test]
    fn single_image_is_rectified_gradient() {
        let g = graph("input 3 9 9\nconv 3 1 1 4\nrelu\nconv 3 1 1 4\n", 3);
        let src = ImageSource::synthetic(1, [3, 9, 9], 5, Normalization::imagenet()).unwrap();
        let t = Target { node: 3, reduction: Reduction::CenterChannelMean };
        let erf = accumulate_erf(&g, &src, &t, 1).unwrap();
        let grad = image_gradient(&g, src.get(0), &t).unwrap();
        assert_eq!(erf.field, grad.map(|v| v.max(0.0)));
        assert_eq!(erf.target.center, Some([4, 4]));
    }

    #[test]
    fn one_by_one_chain_is_local() {
        let g = graph("input 3 7 7\nconv 1 1 0 4\nrelu\nconv 1 1 0 4\n", 11);
        let src = ImageSource::synthetic(8, [3, 7, 7], 1, Normalization::identity(3)).unwrap();
        let t = Target { node: 3, reduction: Reduction::CenterChannelMean };
        let erf = accumulate_erf(&g, &src, &t, 1).unwrap();
        let raw = image_gradient(&g, src.get(0), &t).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                if (y, x) != (3, 3) {
                    assert_eq!(erf.field.get(y, x), 0.0);
                    assert_eq!(raw.get(y, x), 0.0);
                }
            }
        }
        assert_ne!(raw.get(3, 3), 0.0);
    }

    #[test]
    fn empty_source_rejected() {
        assert!(ImageSource::from_raw(Vec::new(), Normalization::identity(3), "x").is_err());
    }

    #[test]
    fn output_target_checks() {
        let g = graph("input 1 4 4\nconv 3 1 1 2\ngap\nfc 3\n", 1);
        assert!(output_target(&g, ClassMode::Index(3)).is_err());
        assert_eq!(output_target(&g, ClassMode::Index(2)).unwrap().reduction, Reduction::LogitIndex(2));
        let spatial = graph("input 1 4 4\nconv 3 1 1 2\n", 1);
        assert!(output_target(&spatial, ClassMode::Mean).is_err());
    }
}
