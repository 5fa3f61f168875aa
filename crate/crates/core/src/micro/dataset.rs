//! Micro-object images: a varied background with one small solid patch
//! whose colour is the label.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm::{self, RgbImage};

/// Template pixels are squeezed into this range so that no background pixel
/// can equal either class colour.
pub const TEMPLATE_RANGE: (u8, u8) = (16, 239);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSource {
    /// Seeded coloured noise plus smoothed blobs.
    Procedural,
    /// `.ppm` images at least as large as the output, randomly cropped.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroDatasetConfig {
    pub templates: TemplateSource,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub color_a: [u8; 3],
    pub color_b: [u8; 3],
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for MicroDatasetConfig {
    fn default() -> Self {
        MicroDatasetConfig {
            templates: TemplateSource::Procedural,
            height: 64,
            width: 64,
            patch: 8,
            color_a: [0, 0, 0],
            color_b: [255, 0, 0],
            train_per_class: 500,
            test_per_class: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroSample {
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    /// 0 for class A, 1 for class B.
    pub label: usize,
    /// Top-left corner of the patch as `(x, y)`.
    pub patch_at: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroSplit {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<MicroSample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroDataset {
    pub train: MicroSplit,
    pub test: MicroSplit,
    pub patch: usize,
    pub colors: [[u8; 3]; 2],
}

// Distinct streams per split so train and test never share a template.
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

pub fn generate_micro_dataset(cfg: &MicroDatasetConfig) -> Result<MicroDataset> {
    let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
    if p == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if p > h || p > w {
        return Err(Error::InvalidArgument(format!("patch {p}x{p} larger than image {w}x{h}")));
    }
    if cfg.color_a == cfg.color_b {
        return Err(Error::InvalidArgument("class colours must differ".into()));
    }
    let pool = match &cfg.templates {
        TemplateSource::Procedural => None,
        TemplateSource::Dir(dir) => Some(load_templates(dir, h, w)?),
    };
    let split = |n: usize, stream: u64| -> MicroSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let samples = (0..2 * n)
            .map(|i| {
                let label = i % 2;
                let mut rgb = match &pool {
                    None => procedural_template(&mut rng, h, w),
                    Some(pool) => crop_template(&mut rng, pool, h, w),
                };
                let x0 = rng.random_range(0..=w - p);
                let y0 = rng.random_range(0..=h - p);
                let color = if label == 0 { cfg.color_a } else { cfg.color_b };
                for y in y0..y0 + p {
                    for x in x0..x0 + p {
                        rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                    }
                }
                MicroSample { rgb, label, patch_at: (x0, y0) }
            })
            .collect();
        MicroSplit { height: h, width: w, samples }
    };
    Ok(MicroDataset {
        train: split(cfg.train_per_class, TRAIN_STREAM),
        test: split(cfg.test_per_class, TEST_STREAM),
        patch: p,
        colors: [cfg.color_a, cfg.color_b],
    })
}

fn squeeze(v: f64) -> u8 {
    let (lo, hi) = (TEMPLATE_RANGE.0 as f64, TEMPLATE_RANGE.1 as f64);
    (lo + v.clamp(0.0, 1.0) * (hi - lo)).round() as u8
}

/// Smooth colour gradient, a few soft blobs and pixel noise.
fn procedural_template(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let tilt: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)]);
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            let centre = [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)];
            let radius = rng.random_range(0.08..0.3) * w.min(h) as f64;
            let delta = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
            (centre, radius, delta)
        })
        .collect();
    let mut out = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
            for c in 0..3 {
                let mut val = base[c] + tilt[c][0] * u + tilt[c][1] * v;
                for (centre, r, delta) in &blobs {
                    let d2 = (x as f64 - centre[0]).powi(2) + (y as f64 - centre[1]).powi(2);
                    val += delta[c] * (-d2 / (2.0 * r * r)).exp();
                }
                val += rng.random_range(-0.08..0.08);
                out[(y * w + x) * 3 + c] = squeeze(val);
            }
        }
    }
    out
}

fn load_templates(dir: &Path, h: usize, w: usize) -> Result<Vec<RgbImage>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "template directory has no .ppm images"));
    }
    files
        .iter()
        .map(|f| {
            let img = pnm::read_ppm(f)?;
            if img.width < w || img.height < h {
                return Err(Error::format(f, format!("template is {}x{}, smaller than {w}x{h}", img.width, img.height)));
            }
            Ok(img)
        })
        .collect()
}

fn crop_template(rng: &mut ChaCha8Rng, pool: &[RgbImage], h: usize, w: usize) -> Vec<u8> {
    let img = &pool[rng.random_range(0..pool.len())];
    let x0 = rng.random_range(0..=img.width - w);
    let y0 = rng.random_range(0..=img.height - h);
    let mut out = Vec::with_capacity(h * w * 3);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            for c in 0..3 {
                out.push(squeeze(img.data[(y * img.width + x) * 3 + c]));
            }
        }
    }
    out
}

impl MicroSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let b = self.samples.iter().filter(|s| s.label == 1).count();
        [self.samples.len() - b, b]
    }
}

/// Top-left corners of every solid `patch x patch` block of `color`.
pub fn find_blocks(rgb: &[u8], h: usize, w: usize, patch: usize, color: [u8; 3]) -> Vec<(usize, usize)> {
    let is = |y: usize, x: usize| rgb[(y * w + x) * 3..(y * w + x) * 3 + 3] == color;
    let mut found = Vec::new();
    if patch > h || patch > w {
        return found;
    }
    for y0 in 0..=h - patch {
        for x0 in 0..=w - patch {
            if (y0..y0 + patch).all(|y| (x0..x0 + patch).all(|x| is(y, x))) {
                found.push((x0, y0));
            }
        }
    }
    found
}

/// Mirrors an interleaved RGB image left to right.
pub fn hflip_rgb(rgb: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; rgb.len()];
    for y in 0..h {
        for x in 0..w {
            let (s, d) = ((y * w + x) * 3, (y * w + (w - 1 - x)) * 3);
            out[d..d + 3].copy_from_slice(&rgb[s..s + 3]);
        }
    }
    out
}

impl MicroDataset {
    /// Writes `train/NNNNN.ppm`, `test/NNNNN.ppm` and `labels.csv`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut csv = String::from("split,file,label,patch_x,patch_y\n");
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (i, s) in split.samples.iter().enumerate() {
                let file = format!("{i:05}.ppm");
                pnm::write_ppm8(sub.join(&file), split.width, split.height, &s.rgb)?;
                let _ = writeln!(csv, "{name},{name}/{file},{},{},{}", s.label, s.patch_at.0, s.patch_at.1);
            }
        }
        let labels = dir.join("labels.csv");
        std::fs::write(&labels, csv).map_err(|e| Error::io(&labels, e))
    }
}
