use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::seed::derive_seed;
use crate::surgery::{block_starts, derive_permutation, PlanKind, SurgeryPlan};

use super::manifest::{ExperimentKind, ExperimentManifest};

/// What a cell does to the pretrained checkpoint before training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Condition {
    Finetune {
        plan: PlanKind,
        /// Run index `n` for permutation cells; cells with the same index
        /// share one permutation across tasks.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        permutation_index: Option<usize>,
    },
    Probe {
        layer: usize,
    },
}

impl Condition {
    fn progressive(k: usize) -> Self {
        Self::Finetune {
            plan: PlanKind::Progressive { k },
            permutation_index: None,
        }
    }

    fn plan(plan: PlanKind) -> Self {
        Self::Finetune {
            plan,
            permutation_index: None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Probe { layer } => format!("probe-k{layer}"),
            Self::Finetune {
                permutation_index: Some(n),
                ..
            } => format!("perm-{n:03}"),
            Self::Finetune { plan, .. } => SurgeryPlan::new(plan.clone(), 0).label(),
        }
    }
}

/// One point of an experiment grid, executed `trials` times.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub key: String,
    pub task: Task,
    /// Training-set size (the full pool for probe cells).
    pub size: usize,
    pub condition: Condition,
    pub trials: usize,
}

impl Cell {
    fn new(task: Task, size: usize, condition: Condition, trials: usize) -> Self {
        let key = format!("{}/n{}/{}", task.key(), size, condition.label());
        Self {
            key,
            task,
            size,
            condition,
            trials,
        }
    }

    /// Seed of trial `trial` of this cell: `hash(master_seed, "trial", key, trial)`.
    pub fn trial_seed(&self, master_seed: u64, trial: usize) -> u64 {
        derive_seed(master_seed, &["trial", &self.key, &trial.to_string()])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub num_layers: usize,
    pub cells: Vec<Cell>,
    /// `task/size` pairs left out because the size exceeds the task's pool.
    pub skipped: Vec<String>,
}

impl Grid {
    pub fn num_trials(&self) -> usize {
        self.cells.iter().map(|c| c.trials).sum()
    }
}

/// Enumerates the cells of `manifest` for an encoder with `num_layers` layers.
pub fn build_grid(manifest: &ExperimentManifest, num_layers: usize) -> Grid {
    let l = num_layers;
    let layers = |default: Vec<usize>| -> Vec<usize> { manifest.layers.clone().unwrap_or(default) };
    let references = || vec![Condition::progressive(l), Condition::progressive(0)];

    let finetune_conditions: Vec<Condition> = match manifest.experiment {
        ExperimentKind::Progressive | ExperimentKind::Variant => layers((0..=l).collect())
            .into_iter()
            .map(Condition::progressive)
            .collect(),
        ExperimentKind::Localized => {
            let mut c = references();
            for start in block_starts(l, manifest.block_len, manifest.block_stride) {
                let len = manifest.block_len;
                c.push(Condition::plan(PlanKind::BlockReinit { start, len }));
                c.push(Condition::plan(PlanKind::BlockPreserve { start, len }));
            }
            c
        }
        ExperimentKind::SingleLayer => {
            let mut c = references();
            c.extend(
                layers((1..=l).collect())
                    .into_iter()
                    .map(|k| Condition::plan(PlanKind::SingleLayer { k })),
            );
            c
        }
        ExperimentKind::Permutation => {
            let mut c = references();
            for n in 0..manifest.permutations {
                c.push(Condition::Finetune {
                    plan: PlanKind::Permute {
                        permutation: derive_permutation(manifest.master_seed, n, l),
                    },
                    permutation_index: Some(n),
                });
            }
            c
        }
        ExperimentKind::Probing => Vec::new(),
    };
    let probe_layers: Vec<usize> = match manifest.experiment {
        ExperimentKind::Probing => layers((0..=l).collect()),
        ExperimentKind::Progressive | ExperimentKind::Variant if manifest.include_probes => {
            layers((0..=l).collect())
        }
        _ => Vec::new(),
    };

    let mut grid = Grid {
        num_layers: l,
        ..Grid::default()
    };
    for &task in &manifest.tasks {
        let pool = manifest.data.pool_size_for(task);
        for &size in &manifest.sizes {
            if finetune_conditions.is_empty() {
                break;
            }
            if size > pool {
                grid.skipped.push(format!("{}/n{size}", task.key()));
                continue;
            }
            let trials = manifest.trials_for(size);
            for c in &finetune_conditions {
                grid.cells.push(Cell::new(task, size, c.clone(), trials));
            }
        }
        for &layer in &probe_layers {
            let trials = manifest.trials.unwrap_or(3);
            grid.cells
                .push(Cell::new(task, pool, Condition::Probe { layer }, trials));
        }
    }
    grid
}
