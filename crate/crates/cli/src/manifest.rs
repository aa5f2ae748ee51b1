//! Run manifests: the resolved config plus checksums of every input.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: Config,
    /// Command arguments that are not part of the config.
    #[serde(default)]
    pub params: serde_json::Value,
    pub inputs: Vec<Artifact>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            config: config.clone(),
            params: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records a file, or a directory hashed over its sorted file tree.
    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.push(Artifact {
            role: role.into(),
            path: path.display().to_string(),
            sha256: hash_path(path)?,
        });
        Ok(self)
    }

    pub fn outputs(mut self, names: &[&str]) -> Self {
        self.outputs.extend(names.iter().map(|s| s.to_string()));
        self
    }

    /// Writes `out_dir/manifest.json`, creating the directory.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let path = out_dir.join(FILE_NAME);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}
