//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mtal_core::adversary::LabelSubset;
use mtal_core::hash::stable_hash;
use mtal_core::metrics::EvalOptions;
use mtal_core::synthgen::WorldSpec;
use mtal_core::{ModelConfig, TaskMode, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file to split into train/test instead of generating data.
    pub path: Option<PathBuf>,
    /// Fraction of `path` used for training.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            train_fraction: 0.5,
            split_seed: 0,
            train_samples: 5000,
            test_samples: 1000,
            train_seed: 100,
            test_seed: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Subsets swept by `ablate`; empty means every subset valid for the mode.
    pub ablate_subsets: Vec<LabelSubset>,
    pub data: DataConfig,
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs/default"),
            seeds: vec![1, 2, 3, 4, 5],
            ablate_subsets: Vec::new(),
            data: DataConfig::default(),
            world: WorldSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn mode(&self) -> TaskMode {
        self.world.layout().mode
    }

    /// Maps mode-dependent aliases and checks cross-field invariants.
    pub fn resolve(mut self, mode: TaskMode) -> anyhow::Result<Self> {
        self.train.subset = self.train.subset.for_mode(mode);
        self.eval.grid.subset = self.eval.grid.subset.for_mode(mode);
        if self.ablate_subsets.is_empty() {
            self.ablate_subsets = LabelSubset::ablation_family(mode);
        }
        for s in self.ablate_subsets.iter_mut() {
            *s = s.for_mode(mode);
        }
        self.validate(mode)?;
        Ok(self)
    }

    fn validate(&self, mode: TaskMode) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        self.train.subset.check_mode(mode).context("train.subset")?;
        if self.eval.grid.subset.is_none() {
            bail!("eval.grid.subset: the divergence grid needs a nonempty subset");
        }
        self.eval.grid.subset.check_mode(mode).context("eval.grid.subset")?;
        for s in &self.ablate_subsets {
            s.check_mode(mode).context("ablate_subsets")?;
        }
        self.train.validate().context("train")?;
        if self.data.path.is_none() {
            self.world.validate().context("world")?;
            if self.data.train_samples == 0 || self.data.test_samples == 0 {
                bail!("data: train_samples and test_samples must be positive");
            }
        }
        if self.eval.grid.landmark_bins == 0 || self.eval.grid.yaw_bins == 0 {
            bail!("eval.grid: bin counts must be positive");
        }
        Ok(())
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        stable_hash(&c)
    }
}
