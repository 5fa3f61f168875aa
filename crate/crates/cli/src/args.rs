use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "rfscope", version, about = "Receptive-field analysis for convolutional networks")]
pub struct Cli {
    /// Directory for every file a command writes.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormArg {
    /// ImageNet channel mean and std.
    Imagenet,
    /// Leave [0, 1] samples as they are.
    None,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Theoretical receptive field of every (or the named) node.
    Trf {
        /// Spec file, or the name of a bundled spec such as resnet18.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        node: Vec<String>,
    },
    /// Sliding-window path counts from each input pixel to a feature map.
    Coverage {
        #[arg(long)]
        spec: String,
        /// Defaults to the last spatial node.
        #[arg(long)]
        node: Option<String>,
    },
    /// He-initialised weight bundle for a spec.
    Init {
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "weights.rfsw")]
        out: String,
    },
    /// Effective receptive field over a set of images.
    Erf {
        #[arg(long)]
        spec: String,
        /// Weight bundle; He initialisation from --seed when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Directory of .ppm images or a bundle with an `images` tensor.
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        images: Option<PathBuf>,
        /// Number of uniform-noise images drawn from --seed.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `output` or a node name (its centre feature is used).
        #[arg(long, default_value = "output")]
        target: String,
        /// Logit index or `mean`; only for --target output.
        #[arg(long, default_value = "mean")]
        class: String,
        #[arg(long, value_enum, default_value_t = NormArg::Imagenet)]
        norm: NormArg,
    },
    /// 2-D Gaussian fit of a field CSV.
    Fit {
        #[arg(long)]
        erf: PathBuf,
    },
    /// Pixel-sensitivity imbalance indices of a field CSV.
    Imbalance {
        #[arg(long)]
        erf: PathBuf,
        #[arg(long)]
        normalize: bool,
    },
    /// Kernel padding: grows odd stride-2 kernels by one row and column.
    Pad {
        #[arg(long)]
        spec: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Used for initial weights when --weights is absent, and for probes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "padded")]
        out_prefix: String,
        #[arg(long, default_value_t = 20)]
        probes: usize,
    },
    /// Micro-object benchmark: train baseline and padded nets over seeds.
    Micro {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
        /// Uses only the first N configured seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Writes the micro-object dataset of one seed as PPM files.
    MicroData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reruns the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        /// Fail unless every output matches the recorded hash.
        #[arg(long)]
        check: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Trf { .. } => "trf",
            Command::Coverage { .. } => "coverage",
            Command::Init { .. } => "init",
            Command::Erf { .. } => "erf",
            Command::Fit { .. } => "fit",
            Command::Imbalance { .. } => "imbalance",
            Command::Pad { .. } => "pad",
            Command::Micro { .. } => "micro",
            Command::MicroData { .. } => "micro-data",
            Command::Replay { .. } => "replay",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::Init { seed, .. }
            | Command::Erf { seed, .. }
            | Command::Pad { seed, .. }
            | Command::MicroData { seed, .. } => Some(*seed),
            _ => None,
        }
    }

    /// Makes every input path absolute so a manifest replays from any
    /// working directory.
    pub fn resolve(&mut self) {
        fn abs(p: &mut PathBuf) {
            if let Ok(a) = std::path::absolute(&*p) {
                *p = a;
            }
        }
        fn abs_spec(s: &mut String) {
            if Path::new(s).exists() {
                if let Ok(a) = std::path::absolute(&*s) {
                    *s = a.to_string_lossy().into_owned();
                }
            }
        }
        match self {
            Command::Trf { spec, .. } | Command::Coverage { spec, .. } | Command::Init { spec, .. } => abs_spec(spec),
            Command::Erf { spec, weights, images, .. } => {
                abs_spec(spec);
                weights.iter_mut().for_each(abs);
                images.iter_mut().for_each(abs);
            }
            Command::Pad { spec, weights, .. } => {
                abs_spec(spec);
                weights.iter_mut().for_each(abs);
            }
            Command::Fit { erf } | Command::Imbalance { erf, .. } => abs(erf),
            Command::Micro { config, .. } | Command::MicroData { config, .. } => abs(config),
            Command::Replay { manifest, .. } => abs(manifest),
        }
    }
}
