use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn relab(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_relab"));
    cmd.args(args).env_remove("RELAB_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Writes a small-model manifest and its untrained checkpoint into `dir`.
fn setup(dir: &Path) -> PathBuf {
    let manifest = dir.join("m.json");
    fs::write(
        &manifest,
        r#"{"schema_version": 1, "name": "cli", "experiment": "progressive",
            "tasks": ["toy-sent"], "sizes": [20], "trials": 2, "master_seed": 1,
            "checkpoint": "ck.rlab",
            "pretrain": {"model": {"num_layers": 2, "hidden_size": 8, "num_heads": 2,
                "intermediate_size": 16, "vocab_size": 68, "max_seq_len": 32, "type_vocab_size": 2},
                "corpus_size": 50, "heldout_size": 20},
            "data": {"pool_size": 40},
            "hyper": {"learning_rate": 0.001, "epochs": 1}}"#,
    )
    .unwrap();
    let out = relab(
        &[
            "pretrain",
            "--manifest",
            manifest.to_str().unwrap(),
            "--steps",
            "0",
        ],
        &[],
    );
    stdout_json(&out);
    manifest
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_flags_fail_with_json() {
    let out = relab(&["run", "--bogus"], &[]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "usage");
    assert!(relab(&["--help"], &[]).status.success());
}

#[test]
fn progressive_full_surgery_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let plan = dir.path().join("plan.json");
    fs::write(&plan, r#"{"kind": "progressive", "k": 2, "seed": 7}"#).unwrap();
    let (input, output) = (dir.path().join("ck.rlab"), dir.path().join("out.rlab"));
    let res = stdout_json(&relab(
        &[
            "surgery",
            plan.to_str().unwrap(),
            input.to_str().unwrap(),
            output.to_str().unwrap(),
        ],
        &[],
    ));
    assert_eq!(fs::read(&input).unwrap(), fs::read(&output).unwrap());
    assert_eq!(res["report"]["reinitialized"].as_array().unwrap().len(), 0);

    fs::write(&plan, r#"{"kind": "progressive", "k": 0, "seed": 7}"#).unwrap();
    let res = stdout_json(&relab(
        &[
            "surgery",
            plan.to_str().unwrap(),
            input.to_str().unwrap(),
            output.to_str().unwrap(),
        ],
        &[],
    ));
    assert_eq!(res["report"]["reinitialized"].as_array().unwrap().len(), 32);
    assert_ne!(fs::read(&input).unwrap(), fs::read(&output).unwrap());
}

#[test]
fn runs_are_reproducible_and_reports_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = setup(dir.path());
    let m = m.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = stdout_json(&relab(
        &["run", m, "--out", a.to_str().unwrap(), "--jobs", "1"],
        &[],
    ));
    assert_eq!(first["executed"], 6);
    stdout_json(&relab(
        &[
            "run",
            "--manifest",
            m,
            "--out",
            b.to_str().unwrap(),
            "--jobs",
            "3",
        ],
        &[],
    ));
    assert_eq!(tree(&a.join("runs")), tree(&b.join("runs")));

    let again = stdout_json(&relab(&["run", m, "--out", a.to_str().unwrap()], &[]));
    assert_eq!(again["executed"], 0);

    let r1 = dir.path().join("r1");
    let r2 = dir.path().join("r2");
    stdout_json(&relab(
        &["report", a.to_str().unwrap(), "--out", r1.to_str().unwrap()],
        &[],
    ));
    stdout_json(&relab(
        &["report", b.to_str().unwrap(), "--out", r2.to_str().unwrap()],
        &[],
    ));
    assert_eq!(tree(&r1), tree(&r2));
    assert_eq!(
        fs::read_to_string(r1.join("fig1.csv")).unwrap().lines().count(),
        4
    );
}

#[test]
fn seed_environment_variable_overrides_master_seed() {
    let dir = tempfile::tempdir().unwrap();
    let m = setup(dir.path());
    let m = m.to_str().unwrap();
    let out = dir.path().join("o");
    let plain = stdout_json(&relab(&["run", m, "--out", out.to_str().unwrap()], &[]));
    let seeded = stdout_json(&relab(
        &["run", m, "--out", out.to_str().unwrap()],
        &[("RELAB_SEED", "99")],
    ));
    assert_ne!(plain["run_hash"], seeded["run_hash"]);
    assert_eq!(seeded["executed"], 6);
    let bad = relab(
        &["run", m, "--out", out.to_str().unwrap()],
        &[("RELAB_SEED", "x")],
    );
    assert_eq!(stderr_json(&bad)["error"], "manifest");
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let m = setup(dir.path());
    fs::remove_file(dir.path().join("ck.rlab")).unwrap();
    let out = relab(
        &[
            "run",
            m.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "missing_checkpoint");

    let out = relab(&["report", dir.path().to_str().unwrap()], &[]);
    assert_eq!(stderr_json(&out)["error"], "empty_store");
}

#[test]
fn datagen_writes_jsonl_splits() {
    let dir = tempfile::tempdir().unwrap();
    let res = stdout_json(&relab(
        &[
            "datagen",
            "--task",
            "toy-pair",
            "--size",
            "30",
            "--out",
            dir.path().to_str().unwrap(),
        ],
        &[],
    ));
    assert_eq!(res["train"], 30);
    let train = fs::read_to_string(dir.path().join("toy-pair.train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 30);
    let v: serde_json::Value = serde_json::from_str(train.lines().next().unwrap()).unwrap();
    assert!(v["tokens"].is_array() && v["types"].is_array() && v["label"].is_number());
}
