//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use sysid_core::experiment::{ExperimentConfig, Sweep};
use sysid_core::metrics::VolumeConfig;
use sysid_core::model::ModelDescription;
use sysid_core::sim::Scenario;
use sysid_core::train::{Method, TrainConfig};

fn default_seeds() -> usize {
    9
}

/// One file drives every subcommand; sections a command does not need may
/// be omitted.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub scenario: Scenario,
    /// Ground-truth model file, relative to the config file.
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub data_seed: u64,
    /// Tosses written by `gen-data`; defaults to what the split needs.
    #[serde(default)]
    pub tosses: Option<usize>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub volume: VolumeConfig,
}

impl CliConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: CliConfig = toml::from_str(text)?;
        if let Some(f) = &cfg.model_file {
            if cfg.scenario.model.is_some() {
                bail!("give the model either inline under [scenario.model] or as model_file, not both");
            }
            let path = base.join(f);
            let text = fs::read_to_string(&path).with_context(|| format!("reading model file {}", path.display()))?;
            cfg.scenario.model = Some(ModelDescription::from_toml_str(&text)?);
        }
        cfg.scenario.validate()?;
        if let Some(t) = &cfg.train {
            t.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.train
            .clone()
            .context("config has no [train] section (it needs at least a seed)")
    }

    pub fn n_tosses(&self) -> usize {
        if let Some(n) = self.tosses {
            return n;
        }
        if let Ok(e) = self.experiment() {
            return e.n_tosses();
        }
        let t = self.train.clone().unwrap_or_else(|| TrainConfig::new(0));
        t.train_size + t.val_size + t.test_size
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let Some(sweep) = self.sweep.clone() else {
            bail!("config has no [sweep] section");
        };
        if self.methods.is_empty() {
            bail!("config lists no methods");
        }
        let e = ExperimentConfig {
            scenario: self.scenario.clone(),
            methods: self.methods.clone(),
            sweep,
            train: self.train_config()?,
            seeds: self.seeds,
            data_seed: self.data_seed,
            volume: self.volume,
        };
        e.validate()?;
        Ok(e)
    }
}

/// A built-in model name or a model file path.
pub fn load_model(name: &str) -> Result<ModelDescription> {
    if let Ok(d) = ModelDescription::builtin(name) {
        return Ok(d);
    }
    let text = fs::read_to_string(name)
        .with_context(|| format!("'{name}' is neither a built-in model nor a readable file"))?;
    Ok(ModelDescription::from_toml_str(&text)?)
}
