//! Run configuration: one TOML file merging model, training, task, decider,
//! and sampler settings. CLI flags override file values; the fully resolved
//! config is echoed into the run directory before execution so any run can
//! be reproduced from its echo.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tah_core::data::TaskSpec;
use tah_core::decider::DeciderConfig;
use tah_core::model::{ModelConfig, SamplerConfig};
use tah_core::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    #[serde(flatten)]
    pub spec: TaskSpec,
    pub count: usize,
    pub val_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            spec: TaskSpec::default(),
            count: 1500,
            // 1% reserved for validation by default
            val_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub num_prompts: usize,
    pub threshold_sweep: Vec<f64>,
    pub sensitivity_seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new_tokens: 64,
            num_prompts: 8,
            threshold_sweep: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
            sensitivity_seeds: vec![0, 1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decider: DeciderConfig,
    pub task: TaskConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            decider: DeciderConfig {
                hidden_dim: model.hidden_dim,
                ..DeciderConfig::default()
            },
            model,
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies flag overrides, then keeps dependent fields consistent.
    pub fn resolve(mut self, overrides: &Overrides) -> Self {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(d) = overrides.max_depth {
            self.model.max_depth = d;
        }
        if let Some(t) = overrides.threshold {
            self.decider.c_threshold = t;
        }
        // one seed drives the run; the decider reads the backbone's taps
        self.train.seed = self.seed;
        self.decider.hidden_dim = self.model.hidden_dim;
        self.train.val_fraction = self.task.val_fraction;
        self
    }

    pub fn echo(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(path, text)
            .with_context(|| format!("writing resolved config {}", path.display()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_depth: Option<usize>,
    pub threshold: Option<f64>,
}
