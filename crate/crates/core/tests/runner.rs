mod common;

use std::fs;

use common::store::{manifest_json, snapshot, write_checkpoint};
use relab_core::runner::{report, run, ExperimentManifest, RunOptions};
use relab_core::RunnerError;

fn opts(out: &std::path::Path, jobs: usize) -> RunOptions {
    RunOptions {
        out: out.to_path_buf(),
        jobs,
        force: false,
    }
}

fn manifest(
    kind: &str,
    tasks: &[&str],
    dir: &std::path::Path,
    layers: usize,
    extra: &str,
) -> ExperimentManifest {
    let ck = write_checkpoint(dir, layers);
    ExperimentManifest::from_json(&manifest_json(kind, tasks, &ck, extra)).unwrap()
}

fn record_count(run_dir: &std::path::Path) -> usize {
    snapshot(run_dir)
        .keys()
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("trial-"))
        .count()
}

#[test]
fn progressive_grid_writes_one_record_per_trial_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest("progressive", &["toy-pair"], dir.path(), 6, "");
    let out = dir.path().join("out");
    let first = run(&m, &opts(&out, 1)).unwrap();
    assert_eq!(first.executed, 21);
    assert_eq!(record_count(&first.run_dir), 21);
    let index: serde_json::Value =
        serde_json::from_slice(&fs::read(first.run_dir.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["completed"].as_array().unwrap().len(), 7);

    let again = run(&m, &opts(&out, 1)).unwrap();
    assert_eq!(again.executed, 0);
    assert_eq!(again.skipped, 21);

    let reports = report(&out, None, false).unwrap();
    let fig1 = fs::read_to_string(reports[0].out_dir.join("fig1.csv")).unwrap();
    let rows: Vec<&str> = fig1.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("3")), "{fig1}");
}

#[test]
fn serial_and_parallel_stores_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(
        "single_layer",
        &["toy-sent", "toy-accept"],
        dir.path(),
        2,
        r#", "trials": 2"#,
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&m, &opts(&a, 1)).unwrap();
    run(&m, &opts(&b, 4)).unwrap();
    let (sa, sb) = (snapshot(&a.join("runs")), snapshot(&b.join("runs")));
    assert!(!sa.is_empty());
    assert_eq!(sa, sb);
}

#[test]
fn damaged_records_are_quarantined_and_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest("progressive", &["toy-sent"], dir.path(), 1, r#", "trials": 2"#);
    let out = dir.path().join("out");
    let s = run(&m, &opts(&out, 1)).unwrap();
    let before = snapshot(&s.run_dir);
    let cell = s.run_dir.join("toy-sent/n20/progressive-k1");
    fs::write(cell.join("trial-000.json"), b"{\"cell\": ").unwrap();
    fs::write(cell.join("trial-001.json.tmp"), b"partial").unwrap();
    let index = s.run_dir.join("index.json");
    fs::write(&index, b"{\"completed\": []}").unwrap();

    let again = run(&m, &opts(&out, 1)).unwrap();
    assert_eq!(again.quarantined, 2);
    assert_eq!(again.executed, 1);
    let after = snapshot(&s.run_dir);
    for (path, bytes) in &before {
        assert_eq!(after.get(path), Some(bytes), "{}", path.display());
    }
    assert!(s
        .run_dir
        .join("quarantine/toy-sent/n20/progressive-k1/trial-000.json")
        .is_file());
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = manifest("progressive", &["toy-sent"], dir.path(), 1, "");
    m.checkpoint = dir.path().join("nope.rlab");
    assert!(matches!(
        run(&m, &opts(dir.path(), 1)),
        Err(RunnerError::MissingCheckpoint(_))
    ));
}

#[test]
fn permutation_store_correlates_every_task_pair() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(
        "permutation",
        &["toy-sent", "toy-pair", "toy-accept"],
        dir.path(),
        3,
        r#", "trials": 1, "permutations": 4"#,
    );
    let out = dir.path().join("out");
    run(&m, &opts(&out, 2)).unwrap();
    let r = report(&out, None, false).unwrap();
    let table = fs::read_to_string(r[0].out_dir.join("table1.csv")).unwrap();
    let pairs: std::collections::BTreeSet<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(pairs.len(), 3, "{table}");
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[3].is_empty() {
            continue;
        }
        let (r, p, n): (f64, f64, usize) = (
            f[3].parse().unwrap(),
            f[4].parse().unwrap(),
            f[5].parse().unwrap(),
        );
        assert!((relab_core::stats::correlation_p_value(r, n) - p).abs() < 1e-9);
    }
    assert!(r[0].out_dir.join("fig4_kde.csv").is_file());
}

#[test]
fn localized_report_carries_reference_lines() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(
        "localized",
        &["toy-sent"],
        dir.path(),
        3,
        r#", "trials": 2, "block_len": 2"#,
    );
    let out = dir.path().join("out");
    let s = run(&m, &opts(&out, 2)).unwrap();
    let r = report(&out, None, false).unwrap();
    let fig3 = fs::read_to_string(r[0].out_dir.join("fig3.csv")).unwrap();
    let mean_of = |label: &str| -> f64 {
        let dir = s.run_dir.join(format!("toy-sent/n20/{label}"));
        let xs: Vec<f64> = (0..2)
            .map(|t| {
                let v: serde_json::Value =
                    serde_json::from_slice(&fs::read(dir.join(format!("trial-{t:03}.json"))).unwrap())
                        .unwrap();
                v["final_accuracy"].as_f64().unwrap()
            })
            .collect();
        (xs[0] + xs[1]) / 2.0
    };
    let (full, scratch) = (mean_of("progressive-k3"), mean_of("progressive-k0"));
    let rows: Vec<&str> = fig3.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[8].parse::<f64>().unwrap(), full);
        assert_eq!(f[9].parse::<f64>().unwrap(), scratch);
    }
}

#[test]
fn partial_reports_list_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest("progressive", &["toy-sent"], dir.path(), 2, r#", "trials": 2"#);
    let out = dir.path().join("out");
    let s = run(&m, &opts(&out, 1)).unwrap();
    fs::remove_file(s.run_dir.join("toy-sent/n20/progressive-k1/trial-001.json")).unwrap();

    assert!(matches!(
        report(&out, None, false),
        Err(RunnerError::Incomplete(_))
    ));
    let r = report(&out, None, true).unwrap();
    let missing = fs::read_to_string(r[0].out_dir.join("missing.txt")).unwrap();
    assert_eq!(missing.trim(), "toy-sent/n20/progressive-k1 (1/2)");

    let first = snapshot(&r[0].out_dir);
    report(&out, None, true).unwrap();
    assert_eq!(first, snapshot(&r[0].out_dir));
}

#[test]
fn empty_store_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        report(dir.path(), None, false),
        Err(RunnerError::EmptyStore(_))
    ));
}
