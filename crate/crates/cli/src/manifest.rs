use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use rfscope::erf::sha256_hex;

use crate::args::Command;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command. Holds no timestamps so that a
/// rerun writes a byte-identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub command: Command,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    pub fn file_name(subcommand: &str) -> String {
        format!("{subcommand}.manifest.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| crate::usage(format!("{}: {e}", path.display())))
    }
}

/// Collects inputs and outputs while a command runs.
pub struct Recorder {
    pub out_dir: PathBuf,
    inputs: Vec<FileHash>,
    outputs: Vec<String>,
}

impl Recorder {
    pub fn new(out_dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Recorder { out_dir, inputs: Vec::new(), outputs: Vec::new() })
    }

    pub fn input(&mut self, role: &str, path: impl Into<String>, bytes: &[u8]) {
        self.inputs.push(FileHash { role: role.into(), path: path.into(), sha256: sha256_hex(bytes) });
    }

    /// Writes `rel` under the output directory and records it.
    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    /// Records a file some other routine already wrote under the output directory.
    pub fn wrote(&mut self, rel: &str) {
        self.outputs.push(rel.to_string());
    }

    pub fn finish(self, command: &Command, seed: Option<u64>) -> Result<RunManifest> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for rel in &self.outputs {
            let path = self.out_dir.join(rel);
            let bytes = std::fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
            outputs.push(FileHash { role: "output".into(), path: rel.clone(), sha256: sha256_hex(&bytes) });
        }
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: command.name().into(),
            seed,
            command: command.clone(),
            inputs: self.inputs,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let path = self.out_dir.join(RunManifest::file_name(command.name()));
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}
