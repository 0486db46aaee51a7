//! Manifest-driven experiment execution and the on-disk results store.
//!
//! Store layout under the output directory:
//!
//! ```text
//! runs/<run-hash>/manifest.json        manifest as executed
//! runs/<run-hash>/grid.json            enumerated cells
//! runs/<run-hash>/index.json           completed cell keys, sorted
//! runs/<run-hash>/<cell-key>/trial-NNN.json
//! runs/<run-hash>/quarantine/...       unreadable records moved aside
//! reports/<run-hash>/...               output of `report`
//! timings/<run-hash>/<key>/trial-NNN.json
//! ```
//!
//! Cell keys are `task/n<size>/<condition>`, so each cell is a nested
//! directory. `<run-hash>` is derived from the manifest (checkpoint path excluded) and
//! the checkpoint checksum. Wall-clock times live under `timings/` so that
//! everything under `runs/` is a deterministic function of the inputs.

mod grid;
mod manifest;
mod report;

pub use grid::{build_grid, Cell, Condition, Grid};
pub use manifest::{
    DataSection, ExperimentKind, ExperimentManifest, HyperOverrides, PretrainSection, SCHEMA_VERSION,
    SEED_ENV,
};
pub use report::{report, ReportOutput};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_pretrain_corpus, gen_task, subsample, CorpusSequence, GrammarSpec, Task, TaskDataset};
use crate::error::{RunnerError, TrainError};
use crate::model::{load_checkpoint, Checkpoint};
use crate::seed::{derive_seed, sha256_hex};
use crate::surgery::{self, SurgeryPlan};
use crate::train::{finetune, mlm_accuracy, pretrain_mlm, unigram_baseline, ProbeFeatures, TrialRecord};

pub const RECORD_PREFIX: &str = "trial-";

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Worker threads; 0 uses rayon's default.
    pub jobs: usize,
    /// Recompute every trial even if a valid record exists.
    pub force: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub run_hash: String,
    pub cells: usize,
    pub executed: usize,
    pub skipped: usize,
    pub quarantined: usize,
    pub skipped_sizes: Vec<String>,
}

#[derive(Serialize, Deserialize, Default)]
struct Index {
    completed: BTreeSet<String>,
}

#[derive(Serialize)]
struct Timing {
    wall_clock_seconds: f64,
}

pub fn record_file_name(trial: usize) -> String {
    format!("{RECORD_PREFIX}{trial:03}.json")
}

/// Identifies a run by manifest content and checkpoint bytes.
pub fn run_hash(manifest: &ExperimentManifest, checkpoint: &Checkpoint) -> String {
    let mut m = manifest.clone();
    m.checkpoint = PathBuf::new();
    let mut bytes = serde_json::to_vec(&m).expect("manifest serializes");
    bytes.extend_from_slice(checkpoint.checksum().as_bytes());
    sha256_hex(&bytes)[..16].to_string()
}

/// Atomic write: temp file in the same directory, then rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    let dir = path.parent().expect("file paths have a parent");
    fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| RunnerError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunnerError::io(path, e))
}

pub(crate) fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("value serializes");
    v.push(b'\n');
    v
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunnerError> {
    let text = fs::read(path).map_err(|e| RunnerError::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| RunnerError::json(path, e))
}

/// Reads a record if it exists and matches its coordinates.
fn valid_record(path: &Path, cell: &Cell, trial: usize) -> Option<TrialRecord> {
    let r: TrialRecord = read_json(path).ok()?;
    (r.cell == cell.key && r.trial_index == trial && r.task == cell.task).then_some(r)
}

/// Task pools and pretraining corpora derived from a manifest's data section.
pub struct DataContext {
    pub grammar: GrammarSpec,
    pools: BTreeMap<Task, OnceLock<Result<TaskDataset, String>>>,
    data: DataSection,
}

impl DataContext {
    pub fn new(data: &DataSection, tasks: &[Task]) -> Result<Self, RunnerError> {
        let grammar = GrammarSpec::generate(data.grammar.clone(), data.grammar_seed)?;
        Ok(Self {
            grammar,
            pools: tasks.iter().map(|&t| (t, OnceLock::new())).collect(),
            data: data.clone(),
        })
    }

    /// Full train/validation pool of `task`, generated on first use.
    pub fn pool(&self, task: Task) -> Result<&TaskDataset, RunnerError> {
        let cell = self
            .pools
            .get(&task)
            .ok_or_else(|| RunnerError::Manifest(format!("task {task} not in manifest")))?;
        cell.get_or_init(|| {
            gen_task(
                task,
                &self.grammar,
                self.data.pool_size_for(task),
                self.data.task_seed,
            )
            .map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(|e| RunnerError::Manifest(e.clone()))
    }

    pub fn pretrain_corpus(&self, pretrain: &PretrainSection) -> (Vec<CorpusSequence>, Vec<CorpusSequence>) {
        let train = gen_pretrain_corpus(&self.grammar, pretrain.corpus_size, pretrain.corpus_seed);
        let heldout = gen_pretrain_corpus(
            &self.grammar,
            pretrain.heldout_size,
            derive_seed(pretrain.corpus_seed, &["heldout"]),
        );
        (train, heldout)
    }
}

/// Result of [`pretrain`]: the encoder plus held-out masked-LM quality.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    /// Held-out masked-token accuracy of the trained model.
    pub mlm_accuracy: f64,
    /// Held-out accuracy of always predicting the most frequent training token.
    pub unigram_accuracy: f64,
}

/// Masked-LM pretraining on the corpus described by `data` and `pretrain`.
pub fn pretrain(data: &DataSection, pretrain: &PretrainSection) -> Result<PretrainOutcome, RunnerError> {
    let ctx = DataContext::new(data, &[])?;
    let (train, heldout) = ctx.pretrain_corpus(pretrain);
    let out = pretrain_mlm(&pretrain.model, &train, &pretrain.training, pretrain.seed)?;
    let eval_seed = derive_seed(pretrain.seed, &["mlm-eval"]);
    let acc = mlm_accuracy(&out, &heldout, pretrain.training.mask_prob, eval_seed)?;
    Ok(PretrainOutcome {
        unigram_accuracy: unigram_baseline(&train, &heldout),
        mlm_accuracy: acc,
        losses: out.losses,
        checkpoint: out.checkpoint,
    })
}

struct Job<'a> {
    cell: &'a Cell,
    trial: usize,
    path: PathBuf,
}

struct Executor<'a> {
    manifest: &'a ExperimentManifest,
    checkpoint: &'a Checkpoint,
    data: DataContext,
    features: BTreeMap<Task, OnceLock<Result<ProbeFeatures, String>>>,
}

impl Executor<'_> {
    fn probe_features(&self, task: Task) -> Result<&ProbeFeatures, RunnerError> {
        let pool = self.data.pool(task)?;
        self.features[&task]
            .get_or_init(|| ProbeFeatures::compute(self.checkpoint, pool).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| RunnerError::Manifest(e.clone()))
    }

    fn execute(&self, cell: &Cell, trial: usize) -> Result<TrialRecord, RunnerError> {
        let m = self.manifest;
        let seed = cell.trial_seed(m.master_seed, trial);
        let fail = |source: TrainError| RunnerError::Trial {
            cell: cell.key.clone(),
            trial,
            source: Box::new(source),
        };
        let mut record = match &cell.condition {
            Condition::Probe { layer } => {
                let features = self.probe_features(cell.task)?;
                let hyper = m.hyper.probe(derive_seed(seed, &["probe"]));
                features.train_head(*layer, &hyper).map_err(fail)?
            }
            Condition::Finetune { plan, .. } => {
                let pool = self.data.pool(cell.task)?;
                let dataset = subsample(pool, cell.size, trial, m.master_seed)?;
                let plan = SurgeryPlan {
                    kind: plan.clone(),
                    preserve_layer_norm: m.hyper.preserve_layer_norm,
                    zero_biases: m.hyper.zero_biases,
                    seed: derive_seed(seed, &["surgery"]),
                };
                let (ck, surgery_report) = surgery::apply(self.checkpoint, &plan)?;
                let hyper = m.hyper.finetune(derive_seed(seed, &["finetune"]));
                let mut r = finetune(&ck, &surgery_report, &dataset, &hyper).map_err(fail)?;
                r.plan = Some(plan.label());
                r
            }
        };
        record.cell = cell.key.clone();
        record.trial_index = trial;
        Ok(record)
    }
}

fn quarantine(run_dir: &Path, path: &Path) -> Result<(), RunnerError> {
    let rel = path.strip_prefix(run_dir).unwrap_or(path);
    let mut target = run_dir.join("quarantine").join(rel);
    let mut n = 0;
    while target.exists() {
        n += 1;
        target = run_dir.join("quarantine").join(format!("{}.{n}", rel.display()));
    }
    let dir = target.parent().expect("has parent");
    fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;
    fs::rename(path, &target).map_err(|e| RunnerError::io(path, e))
}

fn cell_complete(dir: &Path, cell: &Cell) -> bool {
    (0..cell.trials).all(|t| dir.join(record_file_name(t)).is_file())
}

/// Executes every missing trial of `manifest` into `opts.out`.
pub fn run(manifest: &ExperimentManifest, opts: &RunOptions) -> Result<RunSummary, RunnerError> {
    manifest.validate()?;
    if !manifest.checkpoint.is_file() {
        return Err(RunnerError::MissingCheckpoint(manifest.checkpoint.clone()));
    }
    let checkpoint = load_checkpoint(&manifest.checkpoint)?;
    let grid = build_grid(manifest, checkpoint.config.num_layers);
    let hash = run_hash(manifest, &checkpoint);
    let run_dir = opts.out.join("runs").join(&hash);
    let timing_dir = opts.out.join("timings").join(&hash);
    fs::create_dir_all(&run_dir).map_err(|e| RunnerError::io(&run_dir, e))?;
    write_atomic(&run_dir.join("manifest.json"), &to_json_bytes(manifest))?;
    write_atomic(&run_dir.join("grid.json"), &to_json_bytes(&grid))?;
    let index_path = run_dir.join("index.json");
    let mut index: Index = if opts.force {
        Index::default()
    } else {
        read_json(&index_path).unwrap_or_default()
    };

    let mut summary = RunSummary {
        run_dir: run_dir.clone(),
        run_hash: hash.clone(),
        cells: grid.cells.len(),
        skipped_sizes: grid.skipped.clone(),
        ..RunSummary::default()
    };
    let mut jobs = Vec::new();
    for cell in &grid.cells {
        let dir = run_dir.join(&cell.key);
        for trial in 0..cell.trials {
            let path = dir.join(record_file_name(trial));
            let tmp = path.with_extension("json.tmp");
            if tmp.exists() {
                quarantine(&run_dir, &tmp)?;
                summary.quarantined += 1;
            }
            if !opts.force && index.completed.contains(&cell.key) && path.is_file() {
                summary.skipped += 1;
                continue;
            }
            if path.exists() {
                if !opts.force && valid_record(&path, cell, trial).is_some() {
                    summary.skipped += 1;
                    continue;
                }
                if !opts.force {
                    quarantine(&run_dir, &path)?;
                    summary.quarantined += 1;
                }
            }
            jobs.push(Job { cell, trial, path });
        }
    }
    summary.executed = jobs.len();
    // cells already whole on disk count as complete even without an index entry
    for cell in &grid.cells {
        if cell_complete(&run_dir.join(&cell.key), cell) && !jobs.iter().any(|j| j.cell.key == cell.key) {
            index.completed.insert(cell.key.clone());
        }
    }
    write_atomic(&index_path, &to_json_bytes(&index))?;
    if jobs.is_empty() {
        return Ok(summary);
    }

    let exec = Executor {
        manifest,
        checkpoint: &checkpoint,
        data: DataContext::new(&manifest.data, &manifest.tasks)?,
        features: manifest.tasks.iter().map(|&t| (t, OnceLock::new())).collect(),
    };
    let index = Mutex::new(index);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| RunnerError::Manifest(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(), RunnerError>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let record = exec.execute(job.cell, job.trial)?;
                write_atomic(&job.path, &to_json_bytes(&record))?;
                let timing = timing_dir.join(&job.cell.key).join(record_file_name(job.trial));
                write_atomic(
                    &timing,
                    &to_json_bytes(&Timing {
                        wall_clock_seconds: record.wall_clock_seconds,
                    }),
                )?;
                if cell_complete(job.path.parent().expect("cell dir"), job.cell) {
                    let mut idx = index.lock().expect("index lock");
                    if idx.completed.insert(job.cell.key.clone()) {
                        write_atomic(&index_path, &to_json_bytes(&*idx))?;
                    }
                }
                Ok(())
            })
            .collect()
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;
    Ok(summary)
}
