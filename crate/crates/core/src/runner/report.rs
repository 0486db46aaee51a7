//! Aggregates a results store into per-figure CSV tables and a summary.
//!
//! Every table reports the task's headline metric (Matthews correlation for
//! TOY-ACCEPT, accuracy otherwise) aggregated over the trials of a cell.
//! Intervals use the manifest's error-bar estimator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::Task;
use crate::error::RunnerError;
use crate::stats::{correlation, kde, mean, t_interval, CorrelationMethod, IntervalKind};
use crate::surgery::PlanKind;
use crate::train::TrialRecord;

use super::grid::{Cell, Condition, Grid};
use super::manifest::{ExperimentKind, ExperimentManifest};
use super::{read_json, record_file_name, to_json_bytes, write_atomic};

const KDE_GRID: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportOutput {
    pub run_hash: String,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Cells with fewer records than their trial count.
    pub missing: Vec<String>,
}

/// Trials of one cell that are present on disk.
struct CellData<'a> {
    cell: &'a Cell,
    metrics: Vec<f64>,
}

impl CellData<'_> {
    fn n(&self) -> usize {
        self.metrics.len()
    }

    fn mean(&self) -> Option<f64> {
        (!self.metrics.is_empty()).then(|| mean(&self.metrics))
    }

    fn interval(&self, kind: IntervalKind) -> (Option<f64>, Option<f64>) {
        match t_interval(&self.metrics, kind) {
            Ok(ci) => (Some(ci.low()), Some(ci.high())),
            Err(_) => (None, None),
        }
    }
}

#[derive(Serialize)]
struct Fig1Row {
    task: Task,
    size: usize,
    k: usize,
    n: usize,
    mean: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    probe_acc_at_k: Option<f64>,
}

#[derive(Serialize)]
struct Fig3Row {
    task: Task,
    size: usize,
    block_start: usize,
    condition: &'static str,
    n: usize,
    mean: Option<f64>,
    bar_low: Option<f64>,
    bar_high: Option<f64>,
    full_mean: Option<f64>,
    scratch_mean: Option<f64>,
}

#[derive(Serialize)]
struct SingleLayerRow {
    task: Task,
    size: usize,
    k: usize,
    n: usize,
    mean: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    full_mean: Option<f64>,
    scratch_mean: Option<f64>,
}

#[derive(Serialize)]
struct Fig4Row {
    task: Task,
    size: usize,
    permutation_id: usize,
    permutation: String,
    n: usize,
    metric: Option<f64>,
    full_mean: Option<f64>,
    scratch_mean: Option<f64>,
}

#[derive(Serialize)]
struct KdeRow {
    task: Task,
    size: usize,
    x: f64,
    density: f64,
}

#[derive(Serialize)]
struct Table1Row {
    size: usize,
    task_pair: String,
    method: &'static str,
    /// Empty when a task's metric is constant across permutations.
    r: Option<f64>,
    p: Option<f64>,
    n: usize,
}

#[derive(Serialize)]
struct ProbeRow {
    task: Task,
    layer: usize,
    n: usize,
    mean: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
}

#[derive(Serialize)]
struct CellSummary<'a> {
    key: &'a str,
    n: usize,
    trials: usize,
    mean: Option<f64>,
    low: Option<f64>,
    high: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    run_hash: &'a str,
    name: &'a str,
    experiment: ExperimentKind,
    interval: IntervalKind,
    num_layers: usize,
    cells_total: usize,
    cells_complete: usize,
    records: usize,
    missing: &'a [String],
    skipped_sizes: &'a [String],
    cells: Vec<CellSummary<'a>>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), RunnerError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_io = |e: csv::Error| RunnerError::io(path, e.into());
    if rows.is_empty() {
        w.write_record(header).map_err(to_io)?;
    }
    for r in rows {
        w.serialize(r).map_err(to_io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| RunnerError::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Run directories under `store`: the directory itself if it holds a
/// `manifest.json`, otherwise every `runs/<hash>` below it.
fn run_dirs(store: &Path) -> Result<Vec<PathBuf>, RunnerError> {
    if store.join("manifest.json").is_file() {
        return Ok(vec![store.to_path_buf()]);
    }
    let runs = store.join("runs");
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&runs) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect(),
        Err(_) => Vec::new(),
    };
    dirs.sort();
    Ok(dirs)
}

/// Writes report tables for every run in `store` to
/// `<store>/reports/<run-hash>/`, or under `out` when given.
///
/// Without `partial`, any incomplete cell is an error.
pub fn report(store: &Path, out: Option<&Path>, partial: bool) -> Result<Vec<ReportOutput>, RunnerError> {
    let dirs = run_dirs(store)?;
    if dirs.is_empty() {
        return Err(RunnerError::EmptyStore(store.to_path_buf()));
    }
    let mut outputs = Vec::new();
    let mut any_records = false;
    for dir in &dirs {
        let hash = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let manifest: ExperimentManifest = read_json(&dir.join("manifest.json"))?;
        let grid: Grid = read_json(&dir.join("grid.json"))?;
        let data: Vec<CellData> = grid
            .cells
            .iter()
            .map(|cell| CellData {
                cell,
                metrics: (0..cell.trials)
                    .filter_map(|t| {
                        read_json::<TrialRecord>(&dir.join(&cell.key).join(record_file_name(t)))
                            .ok()
                            .filter(|r| r.cell == cell.key && r.trial_index == t)
                            .map(|r| r.metric())
                    })
                    .collect(),
            })
            .collect();
        let missing: Vec<String> = data
            .iter()
            .filter(|d| d.n() < d.cell.trials)
            .map(|d| format!("{} ({}/{})", d.cell.key, d.n(), d.cell.trials))
            .collect();
        let records: usize = data.iter().map(|d| d.n()).sum();
        any_records |= records > 0;
        if records == 0 {
            continue;
        }
        if !missing.is_empty() && !partial {
            return Err(RunnerError::Incomplete(missing));
        }
        let out_dir = match (out, dirs.len()) {
            (Some(o), 1) => o.to_path_buf(),
            (Some(o), _) => o.join(&hash),
            (None, _) => {
                let root = if store.join("manifest.json").is_file() {
                    store.parent().and_then(Path::parent).unwrap_or(store)
                } else {
                    store
                };
                root.join("reports").join(&hash)
            }
        };
        let files = emit(&out_dir, &hash, &manifest, &grid, &data, &missing)?;
        outputs.push(ReportOutput {
            run_hash: hash,
            out_dir,
            files,
            missing,
        });
    }
    if !any_records {
        return Err(RunnerError::EmptyStore(store.to_path_buf()));
    }
    Ok(outputs)
}

/// Mean metric of the finetuning cell with exactly this plan.
fn plan_mean(data: &[CellData], task: Task, size: usize, plan: &PlanKind) -> Option<f64> {
    data.iter()
        .find(|d| {
            d.cell.task == task
                && d.cell.size == size
                && matches!(&d.cell.condition, Condition::Finetune { plan: p, permutation_index: None } if p == plan)
        })
        .and_then(CellData::mean)
}

fn emit(
    out_dir: &Path,
    hash: &str,
    manifest: &ExperimentManifest,
    grid: &Grid,
    data: &[CellData],
    missing: &[String],
) -> Result<Vec<PathBuf>, RunnerError> {
    let kind = manifest.interval_kind();
    let l = grid.num_layers;
    let full = PlanKind::Progressive { k: l };
    let scratch = PlanKind::Progressive { k: 0 };
    let refs = |task, size| {
        (
            plan_mean(data, task, size, &full),
            plan_mean(data, task, size, &scratch),
        )
    };
    let mut files = Vec::new();
    let mut emit_csv = |name: &str, write: &dyn Fn(&Path) -> Result<(), RunnerError>| {
        let path = out_dir.join(name);
        write(&path).map(|()| files.push(path))
    };

    // (task, layer) -> (n, mean, (ci_low, ci_high))
    type ProbeMean = (usize, Option<f64>, (Option<f64>, Option<f64>));
    let probe_means: BTreeMap<(Task, usize), ProbeMean> = data
        .iter()
        .filter_map(|d| match d.cell.condition {
            Condition::Probe { layer } => Some(((d.cell.task, layer), (d.n(), d.mean(), d.interval(kind)))),
            _ => None,
        })
        .collect();

    match manifest.experiment {
        ExperimentKind::Progressive | ExperimentKind::Variant => {
            let rows: Vec<Fig1Row> = data
                .iter()
                .filter_map(|d| match &d.cell.condition {
                    Condition::Finetune {
                        plan: PlanKind::Progressive { k },
                        ..
                    } => {
                        let (ci_low, ci_high) = d.interval(kind);
                        Some(Fig1Row {
                            task: d.cell.task,
                            size: d.cell.size,
                            k: *k,
                            n: d.n(),
                            mean: d.mean(),
                            ci_low,
                            ci_high,
                            probe_acc_at_k: probe_means.get(&(d.cell.task, *k)).and_then(|p| p.1),
                        })
                    }
                    _ => None,
                })
                .collect();
            emit_csv("fig1.csv", &|p| {
                write_csv(
                    p,
                    &rows,
                    &[
                        "task",
                        "size",
                        "k",
                        "n",
                        "mean",
                        "ci_low",
                        "ci_high",
                        "probe_acc_at_k",
                    ],
                )
            })?;
        }
        ExperimentKind::Localized => {
            let rows: Vec<Fig3Row> = data
                .iter()
                .filter_map(|d| {
                    let (start, condition) = match &d.cell.condition {
                        Condition::Finetune {
                            plan: PlanKind::BlockReinit { start, .. },
                            ..
                        } => (*start, "reinit"),
                        Condition::Finetune {
                            plan: PlanKind::BlockPreserve { start, .. },
                            ..
                        } => (*start, "preserve"),
                        _ => return None,
                    };
                    let (bar_low, bar_high) = d.interval(kind);
                    let (full_mean, scratch_mean) = refs(d.cell.task, d.cell.size);
                    Some(Fig3Row {
                        task: d.cell.task,
                        size: d.cell.size,
                        block_start: start,
                        condition,
                        n: d.n(),
                        mean: d.mean(),
                        bar_low,
                        bar_high,
                        full_mean,
                        scratch_mean,
                    })
                })
                .collect();
            emit_csv("fig3.csv", &|p| {
                write_csv(
                    p,
                    &rows,
                    &[
                        "task",
                        "size",
                        "block_start",
                        "condition",
                        "n",
                        "mean",
                        "bar_low",
                        "bar_high",
                        "full_mean",
                        "scratch_mean",
                    ],
                )
            })?;
        }
        ExperimentKind::SingleLayer => {
            let rows: Vec<SingleLayerRow> = data
                .iter()
                .filter_map(|d| match &d.cell.condition {
                    Condition::Finetune {
                        plan: PlanKind::SingleLayer { k },
                        ..
                    } => {
                        let (ci_low, ci_high) = d.interval(kind);
                        let (full_mean, scratch_mean) = refs(d.cell.task, d.cell.size);
                        Some(SingleLayerRow {
                            task: d.cell.task,
                            size: d.cell.size,
                            k: *k,
                            n: d.n(),
                            mean: d.mean(),
                            ci_low,
                            ci_high,
                            full_mean,
                            scratch_mean,
                        })
                    }
                    _ => None,
                })
                .collect();
            emit_csv("single_layer.csv", &|p| {
                write_csv(
                    p,
                    &rows,
                    &[
                        "task",
                        "size",
                        "k",
                        "n",
                        "mean",
                        "ci_low",
                        "ci_high",
                        "full_mean",
                        "scratch_mean",
                    ],
                )
            })?;
        }
        ExperimentKind::Permutation => {
            let rows: Vec<Fig4Row> = data
                .iter()
                .filter_map(|d| match &d.cell.condition {
                    Condition::Finetune {
                        plan: PlanKind::Permute { permutation },
                        permutation_index: Some(n),
                    } => {
                        let (full_mean, scratch_mean) = refs(d.cell.task, d.cell.size);
                        Some(Fig4Row {
                            task: d.cell.task,
                            size: d.cell.size,
                            permutation_id: *n,
                            permutation: permutation
                                .iter()
                                .map(|p| p.to_string())
                                .collect::<Vec<_>>()
                                .join(" "),
                            n: d.n(),
                            metric: d.mean(),
                            full_mean,
                            scratch_mean,
                        })
                    }
                    _ => None,
                })
                .collect();
            // (task, size) -> permutation id -> mean metric
            let mut by_task: BTreeMap<(usize, Task), BTreeMap<usize, f64>> = BTreeMap::new();
            for r in &rows {
                if let Some(m) = r.metric {
                    by_task
                        .entry((r.size, r.task))
                        .or_default()
                        .insert(r.permutation_id, m);
                }
            }
            let mut kde_rows = Vec::new();
            for (&(size, task), perms) in &by_task {
                let samples: Vec<f64> = perms.values().copied().collect();
                if let Ok(est) = kde(&samples, KDE_GRID) {
                    kde_rows.extend(est.grid.iter().zip(&est.density).map(|(&x, &density)| KdeRow {
                        task,
                        size,
                        x,
                        density,
                    }));
                }
            }
            let mut table = Vec::new();
            for &size in &manifest.sizes {
                for (i, &a) in manifest.tasks.iter().enumerate() {
                    for &b in &manifest.tasks[i + 1..] {
                        let (Some(pa), Some(pb)) = (by_task.get(&(size, a)), by_task.get(&(size, b))) else {
                            continue;
                        };
                        let ids: Vec<usize> = pa.keys().filter(|k| pb.contains_key(k)).copied().collect();
                        let xs: Vec<f64> = ids.iter().map(|k| pa[k]).collect();
                        let ys: Vec<f64> = ids.iter().map(|k| pb[k]).collect();
                        for method in [CorrelationMethod::Spearman, CorrelationMethod::Pearson] {
                            let c = correlation(&xs, &ys, method).ok();
                            table.push(Table1Row {
                                size,
                                task_pair: format!("{}/{}", a.key(), b.key()),
                                method: method.key(),
                                r: c.map(|c| c.r),
                                p: c.map(|c| c.p),
                                n: ids.len(),
                            });
                        }
                    }
                }
            }
            emit_csv("fig4.csv", &|p| {
                write_csv(
                    p,
                    &rows,
                    &[
                        "task",
                        "size",
                        "permutation_id",
                        "permutation",
                        "n",
                        "metric",
                        "full_mean",
                        "scratch_mean",
                    ],
                )
            })?;
            emit_csv("fig4_kde.csv", &|p| {
                write_csv(p, &kde_rows, &["task", "size", "x", "density"])
            })?;
            emit_csv("table1.csv", &|p| {
                write_csv(p, &table, &["size", "task_pair", "method", "r", "p", "n"])
            })?;
        }
        ExperimentKind::Probing => {}
    }

    if !probe_means.is_empty() {
        let rows: Vec<ProbeRow> = probe_means
            .iter()
            .map(|(&(task, layer), &(n, mean, (ci_low, ci_high)))| ProbeRow {
                task,
                layer,
                n,
                mean,
                ci_low,
                ci_high,
            })
            .collect();
        emit_csv("probe.csv", &|p| {
            write_csv(p, &rows, &["task", "layer", "n", "mean", "ci_low", "ci_high"])
        })?;
    }

    let cells: Vec<CellSummary> = data
        .iter()
        .map(|d| {
            let (low, high) = d.interval(kind);
            CellSummary {
                key: &d.cell.key,
                n: d.n(),
                trials: d.cell.trials,
                mean: d.mean(),
                low,
                high,
            }
        })
        .collect();
    let summary = Summary {
        run_hash: hash,
        name: &manifest.name,
        experiment: manifest.experiment,
        interval: kind,
        num_layers: l,
        cells_total: data.len(),
        cells_complete: data.len() - missing.len(),
        records: data.iter().map(|d| d.n()).sum(),
        missing,
        skipped_sizes: &grid.skipped,
        cells,
    };
    let text = summary_text(&summary);
    emit_csv("summary.json", &|p| write_atomic(p, &to_json_bytes(&summary)))?;
    emit_csv("summary.txt", &|p| write_atomic(p, text.as_bytes()))?;
    if !missing.is_empty() {
        let listing = missing.iter().map(|m| format!("{m}\n")).collect::<String>();
        emit_csv("missing.txt", &|p| write_atomic(p, listing.as_bytes()))?;
    }
    Ok(files)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn summary_text(s: &Summary) -> String {
    let mut out = format!(
        "run {} ({}, {:?}), L={}\ncells {}/{} complete, {} records, intervals: {:?}\n",
        s.run_hash,
        s.name,
        s.experiment,
        s.num_layers,
        s.cells_complete,
        s.cells_total,
        s.records,
        s.interval
    );
    if !s.skipped_sizes.is_empty() {
        out.push_str(&format!(
            "skipped (size > pool): {}\n",
            s.skipped_sizes.join(", ")
        ));
    }
    out.push('\n');
    let width = s.cells.iter().map(|c| c.key.len()).max().unwrap_or(4);
    for c in &s.cells {
        out.push_str(&format!(
            "{:width$}  n={:<3} mean={}  [{}, {}]\n",
            c.key,
            c.n,
            fmt_opt(c.mean),
            fmt_opt(c.low),
            fmt_opt(c.high),
        ));
    }
    if !s.missing.is_empty() {
        out.push_str(&format!("\nmissing {} cells:\n", s.missing.len()));
        for m in s.missing {
            out.push_str(&format!("  {m}\n"));
        }
    }
    out
}
