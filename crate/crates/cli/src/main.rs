//! `relab` command-line interface.
//!
//! Failures exit nonzero with one JSON object on stderr:
//! `{"error": "<kind>", "message": "<text>"}`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use relab_core::data::{gen_task, write_jsonl, GrammarSpec, Task, TaskDataset};
use relab_core::error::{CheckpointError, DataError, RunnerError, SurgeryError};
use relab_core::model::{load_checkpoint, save_checkpoint};
use relab_core::runner::{self, DataSection, ExperimentManifest, PretrainSection, RunOptions};
use relab_core::surgery::{self, SurgeryPlan};

#[derive(Parser, Debug)]
#[command(
    name = "relab",
    version,
    about = "Layer transferability experiments on a toy encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic task's train and validation splits as JSONL.
    Datagen(DatagenArgs),
    /// Masked-LM pretraining; writes the checkpoint a manifest points at.
    Pretrain(PretrainArgs),
    /// Execute every missing trial of a manifest.
    Run(RunArgs),
    /// Aggregate a results store into figure tables.
    Report(ReportArgs),
    /// Apply one surgery plan to a checkpoint and print the report.
    Surgery(SurgeryArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    #[arg(long)]
    task: Task,
    /// Training examples.
    #[arg(long)]
    size: usize,
    /// Output directory for `<task>.train.jsonl` and `<task>.validation.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Take grammar and seeds from this manifest's `data` section.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overrides the task seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path; defaults to the manifest's `checkpoint`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(value_name = "MANIFEST", required_unless_present = "manifest_flag")]
    manifest: Option<PathBuf>,
    #[arg(long = "manifest", value_name = "MANIFEST", conflicts_with = "manifest")]
    manifest_flag: Option<PathBuf>,
    /// Results store root.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Recompute trials that already have records.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Store root or a single `runs/<hash>` directory.
    store: PathBuf,
    /// Report incomplete grids and list the missing cells.
    #[arg(long)]
    partial: bool,
    /// Output directory (default `<store>/reports/<hash>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SurgeryArgs {
    /// JSON surgery plan, e.g. `{"kind": "progressive", "k": 3, "seed": 1}`.
    plan: PathBuf,
    input: PathBuf,
    output: PathBuf,
}

fn load_manifest(path: &Path) -> Result<ExperimentManifest> {
    let mut m = ExperimentManifest::load(path)?;
    m.apply_env_seed()?;
    Ok(m)
}

fn datagen(a: DatagenArgs) -> Result<serde_json::Value> {
    let data = match &a.manifest {
        Some(p) => load_manifest(p)?.data,
        None => DataSection::default(),
    };
    let grammar = GrammarSpec::generate(data.grammar.clone(), data.grammar_seed)?;
    let ds = gen_task(a.task, &grammar, a.size, a.seed.unwrap_or(data.task_seed))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut files = Vec::new();
    for (split, examples) in [("train", &ds.train), ("validation", &ds.validation)] {
        let path = a.out.join(format!("{}.{split}.jsonl", a.task.key()));
        let mut w =
            BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_jsonl(examples, &mut w)?;
        w.flush()?;
        files.push(path);
    }
    Ok(json!({
        "task": a.task.key(),
        "train": ds.train.len(),
        "validation": ds.validation.len(),
        "positive_fraction": TaskDataset::label_balance(&ds.train),
        "files": files,
    }))
}

fn pretrain(a: PretrainArgs) -> Result<serde_json::Value> {
    let m = load_manifest(&a.manifest)?;
    let mut section: PretrainSection = m.pretrain.clone();
    if let Some(s) = a.steps {
        section.training.steps = s;
    }
    let out = a.out.unwrap_or(m.checkpoint.clone());
    let res = runner::pretrain(&m.data, &section)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&res.checkpoint, &out)?;
    Ok(json!({
        "checkpoint": out,
        "checksum": res.checkpoint.checksum(),
        "steps": section.training.steps,
        "final_loss": res.losses.last(),
        "mlm_accuracy": res.mlm_accuracy,
        "unigram_accuracy": res.unigram_accuracy,
    }))
}

fn run(a: RunArgs) -> Result<serde_json::Value> {
    let path = a
        .manifest
        .or(a.manifest_flag)
        .expect("clap enforces one manifest");
    let m = load_manifest(&path)?;
    let summary = runner::run(
        &m,
        &RunOptions {
            out: a.out,
            jobs: a.jobs,
            force: a.force,
        },
    )?;
    Ok(serde_json::to_value(summary)?)
}

fn report(a: ReportArgs) -> Result<serde_json::Value> {
    let outputs = runner::report(&a.store, a.out.as_deref(), a.partial)?;
    Ok(serde_json::to_value(outputs)?)
}

fn surgery_cmd(a: SurgeryArgs) -> Result<serde_json::Value> {
    let text = fs::read_to_string(&a.plan).with_context(|| format!("reading {}", a.plan.display()))?;
    let plan: SurgeryPlan =
        serde_json::from_str(&text).with_context(|| format!("parsing plan {}", a.plan.display()))?;
    let ck = load_checkpoint(&a.input)?;
    let (out, rep) = surgery::apply(&ck, &plan)?;
    save_checkpoint(&out, &a.output)?;
    Ok(json!({
        "plan": plan.label(),
        "checksum": out.checksum(),
        "report": rep,
    }))
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(r) = e.downcast_ref::<RunnerError>() {
        r.kind()
    } else if e.is::<CheckpointError>() {
        "checkpoint"
    } else if e.is::<SurgeryError>() {
        "surgery"
    } else if e.is::<DataError>() {
        "data"
    } else if e.is::<serde_json::Error>() {
        "json"
    } else if e.is::<std::io::Error>() {
        "io"
    } else {
        "error"
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn dispatch(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Datagen(a) => datagen(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::Surgery(a) => surgery_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": "usage", "message": e.to_string().trim_end() })
            );
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_kind(&e), format!("{e:#}")),
    }
}
