//! Resolved run configuration: defaults < sidecar < `--config` file < flags.

use std::fs;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use mcg_core::bench::BenchConfig;
use mcg_core::data::{DirLayout, SynthConfig};
use mcg_core::model::ModelConfig;
use mcg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub sizes: Vec<usize>,
    pub variants: Vec<String>,
    pub precisions: Vec<String>,
    pub state_dim: usize,
    pub min_time_ms: u64,
    pub samples: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let d = BenchConfig::default();
        Self {
            sizes: d.sizes,
            variants: d.variants.iter().map(ToString::to_string).collect(),
            precisions: d.precisions.iter().map(ToString::to_string).collect(),
            state_dim: d.state_dim,
            min_time_ms: d.min_time.as_millis() as u64,
            samples: d.samples,
        }
    }
}

impl BenchSettings {
    pub fn resolve(&self, seed: u64) -> Result<BenchConfig> {
        Ok(BenchConfig {
            sizes: self.sizes.clone(),
            variants: self.variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?,
            precisions: self.precisions.iter().map(|v| v.parse()).collect::<Result<_, _>>()?,
            state_dim: self.state_dim,
            min_time: Duration::from_millis(self.min_time_ms),
            samples: self.samples,
            seed,
        })
    }
}

/// Everything a command needs besides paths. The top-level `seed` is the only
/// source of randomness and overrides the per-section seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub layout: DirLayout,
    pub bench: BenchSettings,
}

impl Config {
    /// Propagates the top-level seed into every section.
    pub fn finish(mut self) -> Self {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Reads a layer: a TOML config, or the `config` of a JSON run manifest.
fn read_layer(path: &Path) -> Result<toml::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(toml::Value::try_from(&m.config)?);
    }
    let v: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(v)
}

/// Layers `files` (lowest precedence first) over the defaults.
pub fn resolve(files: &[&Path]) -> Result<Config> {
    let mut value = toml::Value::try_from(Config::default())?;
    for f in files {
        merge(&mut value, read_layer(f)?);
    }
    let cfg: Config = value.try_into().context("invalid configuration")?;
    Ok(cfg)
}

/// Name of the config file written next to a checkpoint.
pub const SIDECAR: &str = "config.toml";

pub fn sidecar_of(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_file_name(SIDECAR)
}
