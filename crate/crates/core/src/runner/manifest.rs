use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{GrammarParams, Task};
use crate::error::RunnerError;
use crate::model::ModelConfig;
use crate::stats::IntervalKind;
use crate::train::{FinetuneHyper, PretrainHyper, ProbeHyper};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "RELAB_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Keep layers `1..=k`, reinitialize the rest, for every `k ∈ 0..=L`.
    Progressive,
    /// Reinitialize (or preserve only) one block of consecutive layers.
    Localized,
    /// Reinitialize exactly one layer `k ∈ 1..=L`.
    SingleLayer,
    /// Shuffle whole layers with `N` seeded permutations.
    Permutation,
    /// Linear probes on a frozen encoder, layers `0..=L`.
    Probing,
    /// Progressive grid under non-default finetuning options
    /// (learning-rate multiplier, preserved layer norms).
    Variant,
}

/// Grammar and dataset sizes shared by pretraining and the downstream tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub grammar: GrammarParams,
    pub grammar_seed: u64,
    /// Seed of the task pools (train and validation splits).
    pub task_seed: u64,
    /// Size of the pool each trial subsamples from.
    pub pool_size: usize,
    /// Per-task pool sizes overriding `pool_size`.
    pub pool_sizes: std::collections::BTreeMap<Task, usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            grammar: GrammarParams::default(),
            grammar_seed: 1,
            task_seed: 2,
            pool_size: 10_000,
            pool_sizes: Default::default(),
        }
    }
}

impl DataSection {
    pub fn pool_size_for(&self, task: Task) -> usize {
        self.pool_sizes.get(&task).copied().unwrap_or(self.pool_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub model: ModelConfig,
    pub corpus_size: usize,
    pub heldout_size: usize,
    pub corpus_seed: u64,
    pub seed: u64,
    pub training: PretrainHyper,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            corpus_size: 50_000,
            heldout_size: 2_000,
            corpus_seed: 3,
            seed: 4,
            training: PretrainHyper::default(),
        }
    }
}

/// Finetuning and probing settings; unset fields keep their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperOverrides {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub reinit_lr_multiplier: Option<f64>,
    pub preserve_layer_norm: bool,
    pub zero_biases: bool,
    pub probe_learning_rate: Option<f64>,
    pub probe_epochs: Option<usize>,
}

impl HyperOverrides {
    pub fn finetune(&self, seed: u64) -> FinetuneHyper {
        let d = FinetuneHyper::default();
        FinetuneHyper {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            epochs: self.epochs.or(d.epochs),
            reinit_lr_multiplier: self.reinit_lr_multiplier.unwrap_or(d.reinit_lr_multiplier),
            seed,
        }
    }

    pub fn probe(&self, seed: u64) -> ProbeHyper {
        let d = ProbeHyper::default();
        ProbeHyper {
            epochs: self.probe_epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.probe_learning_rate.unwrap_or(d.learning_rate),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub name: String,
    pub experiment: ExperimentKind,
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub sizes: Vec<usize>,
    /// Trials per cell for every size; when unset, 50 at size 500 and 3 otherwise.
    #[serde(default)]
    pub trials: Option<usize>,
    pub master_seed: u64,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub hyper: HyperOverrides,
    /// Restricts progressive / single-layer / probing grids to these layers.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default = "default_block_len")]
    pub block_len: usize,
    #[serde(default = "default_block_stride")]
    pub block_stride: usize,
    /// Adds probe cells to a progressive grid so `k` can be compared with probing.
    #[serde(default)]
    pub include_probes: bool,
    /// Interval estimator for error bars; defaults to ±2σ for localized
    /// grids and the t-interval otherwise.
    #[serde(default)]
    pub error_bars: Option<IntervalKind>,
}

fn default_permutations() -> usize {
    10
}

fn default_block_len() -> usize {
    3
}

fn default_block_stride() -> usize {
    1
}

impl ExperimentManifest {
    pub fn from_json(text: &str) -> Result<Self, RunnerError> {
        let m: Self = serde_json::from_str(text).map_err(|e| RunnerError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest; a relative checkpoint path is resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
        let mut m = Self::from_json(&text)?;
        if m.checkpoint.is_relative() {
            if let Some(dir) = path.parent() {
                m.checkpoint = dir.join(&m.checkpoint);
            }
        }
        Ok(m)
    }

    /// Applies `RELAB_SEED` if it is set.
    pub fn apply_env_seed(&mut self) -> Result<(), RunnerError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.master_seed = v
                .trim()
                .parse()
                .map_err(|_| RunnerError::Manifest(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |msg: String| Err(RunnerError::Manifest(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.tasks.is_empty() {
            return bad("`tasks` is empty".into());
        }
        if self.experiment != ExperimentKind::Probing && self.sizes.is_empty() {
            return bad("`sizes` is empty".into());
        }
        if self.sizes.contains(&0) {
            return bad("dataset sizes must be positive".into());
        }
        if self.trials == Some(0) {
            return bad("`trials` must be at least 1".into());
        }
        if self.experiment == ExperimentKind::Permutation && self.permutations == 0 {
            return bad("`permutations` must be at least 1".into());
        }
        if self.block_len == 0 || self.block_stride == 0 {
            return bad("`block_len` and `block_stride` must be positive".into());
        }
        if let Some(lr) = self.hyper.learning_rate {
            if lr.is_nan() || lr <= 0.0 {
                return bad(format!("learning_rate {lr} must be positive"));
            }
        }
        Ok(())
    }

    pub fn trials_for(&self, size: usize) -> usize {
        self.trials.unwrap_or(if size == 500 { 50 } else { 3 })
    }

    pub fn interval_kind(&self) -> IntervalKind {
        self.error_bars.unwrap_or(match self.experiment {
            ExperimentKind::Localized => IntervalKind::TwoSigma,
            _ => IntervalKind::T95,
        })
    }
}
