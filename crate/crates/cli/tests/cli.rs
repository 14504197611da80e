use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_BO: [&str; 10] = [
    "--n-outer",
    "2",
    "--m-inner",
    "2",
    "--pool",
    "100",
    "--hw-mappings",
    "2",
    "--refit-steps",
    "1",
];

fn polaris(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polaris"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env_remove("POLARIS_SEED")
        .output()
        .expect("spawn polaris")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = polaris(dir, args);
    assert!(
        out.status.success(),
        "polaris {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    polaris(dir, args).status.code().unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

/// Datasets plus both checkpoints, trained for a handful of epochs.
fn trained() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--fidelity", "low", "--n", "384"]);
    ok(d, &["gen-data", "--fidelity", "high", "--n", "48"]);
    ok(d, &["train-low", "--epochs", "3", "--batch-size", "128"]);
    ok(d, &["train-high", "--epochs", "10", "--eval-interval", "5"]);
    dir
}

#[test]
fn gen_data_writes_header_plus_n_lines_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--fidelity", "low", "--n", "100", "--seed", "7"]);
    let path = d.join("data/low.jsonl");
    assert_eq!(lines(&path).len(), 101);
    let first = std::fs::read(&path).unwrap();
    ok(d, &["gen-data", "--fidelity", "low", "--n", "100", "--seed", "7"]);
    assert_eq!(first, std::fs::read(&path).unwrap());

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap();
    let entry = &manifest["entries"]["data/low.jsonl"];
    assert_eq!(entry["command"], "gen-data");
    assert_eq!(entry["config"]["n"], 100);
    assert!(entry["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_polaris"))
        .arg("--out-dir")
        .arg(d)
        .args(["gen-data", "--fidelity", "low", "--n", "10", "--output", "env.jsonl"])
        .env("POLARIS_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(d, &["gen-data", "--fidelity", "low", "--n", "10", "--seed", "7", "--output", "flag.jsonl"]);
    ok(d, &["gen-data", "--fidelity", "low", "--n", "10", "--output", "zero.jsonl"]);
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("env.jsonl"), read("flag.jsonl"));
    assert_ne!(read("env.jsonl"), read("zero.jsonl"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["gen-data", "--fidelity", "low", "--n", "0"]), 2);
    assert_eq!(code(d, &["gen-data", "--n", "5"]), 2);
    assert_eq!(code(d, &["no-such-command"]), 2);
    assert_eq!(code(d, &["run-dse", "--fix-hw", "16,64"]), 2);
    assert_eq!(code(d, &["make-paper-figures", "--preset", "huge"]), 2);

    // Transfer needs a source checkpoint unless training from scratch.
    ok(d, &["gen-data", "--fidelity", "high", "--n", "20"]);
    let out = polaris(d, &["train-high", "--epochs", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--from-scratch"));
    ok(d, &["train-high", "--epochs", "2", "--eval-interval", "1", "--from-scratch"]);
    assert!(d.join("models/dkl-scratch.json").exists());

    // Fidelity mismatch between command and dataset.
    assert_eq!(code(d, &["train-low", "--data", "data/high.jsonl", "--epochs", "1"]), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("broken.json"), "{ not json").unwrap();
    assert_eq!(code(d, &["--workload", "broken.json", "gen-data", "--fidelity", "low", "--n", "3"]), 1);
}

#[test]
fn training_histories_have_one_row_per_interval() {
    let dir = trained();
    let d = dir.path();
    // header + 10 epochs / interval 5
    assert_eq!(lines(&d.join("train/starlight_rho.csv")).len(), 1 + 2);
    assert_eq!(lines(&d.join("train/starlight-low_loss.csv")).len(), 1 + 3);
    assert!(d.join("models/starlight-low.meta.json").exists());
}

#[test]
fn run_dse_trials_and_report() {
    let dir = trained();
    let d = dir.path();
    let mut args = vec!["--workload", "resnet-like", "run-dse", "--trials", "3"];
    args.extend(SMALL_BO);
    ok(d, &args);
    for seed in 0..3 {
        let path = d.join(format!("runs/polaris/resnet-like-seed{seed}.jsonl"));
        let evals = lines(&path).iter().filter(|l| l.starts_with(r#"{"eval""#)).count();
        // n_outer × m_inner × layers
        assert_eq!(evals, 2 * 2 * 8, "{}", path.display());
    }
    let summary = lines(&d.join("reports/polaris-summary.csv"));
    assert_eq!(summary.len(), 2);
    assert!(summary[0].contains("median") && summary[0].contains("min") && summary[0].contains("max"));

    ok(
        d,
        &[
            "--workload",
            "resnet-like",
            "run-baseline",
            "--kind",
            "offline_random",
            "--samples-per-layer",
            "64",
            "--hw-groups",
            "4",
        ],
    );
    let off = lines(&d.join("runs/offline_random/resnet-like-seed0.jsonl"));
    assert_eq!(off.iter().filter(|l| l.starts_with(r#"{"eval""#)).count(), 8);

    let table = ok(d, &["report", "--compare", "polaris,offline_random"]);
    assert!(table.contains("resnet-like"));
    let cmp = lines(&d.join("reports/comparison.csv"));
    assert_eq!(
        cmp[0],
        "workload,polaris_median_edp,offline_random_median_edp,offline_random_over_polaris"
    );
    assert_eq!(cmp.len(), 2);
    assert_eq!(code(d, &["report", "--compare", "polaris,nothing"]), 2);
}

#[test]
fn software_dse_uses_twenty_steps_per_layer() {
    let dir = trained();
    let d = dir.path();
    ok(
        d,
        &[
            "--workload",
            "bert-like",
            "run-dse",
            "--fix-hw",
            "16,64,256",
            "--pool",
            "100",
            "--refit-steps",
            "1",
        ],
    );
    let h = lines(&d.join("runs/polaris-sw/bert-like-seed0.jsonl"));
    assert_eq!(h.iter().filter(|l| l.starts_with(r#"{"eval""#)).count(), 20 * 6);
    assert!(h.iter().filter(|l| l.starts_with(r#"{"eval""#)).all(|l| l.contains(r#""array_dim":16"#)));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = trained();
    let d = dir.path();
    let mut args = vec!["--workload", "resnet-like", "run-dse"];
    args.extend(SMALL_BO);
    ok(d, &args);
    let path = d.join("runs/polaris/resnet-like-seed0.jsonl");
    let full = std::fs::read_to_string(&path).unwrap();

    // Cut the file mid-line, as a crash would.
    let keep: String = full.lines().take(12).map(|l| format!("{l}\n")).collect();
    let torn = &full.lines().nth(12).unwrap()[..20];
    std::fs::write(&path, format!("{keep}{torn}")).unwrap();

    let mut resume = args.clone();
    resume.extend(["--resume", "runs/polaris/resnet-like-seed0.jsonl"]);
    ok(d, &resume);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), full);

    // A different budget cannot continue this history.
    let mut other = resume.clone();
    other[4] = "3";
    assert_eq!(code(d, &other), 2);
}

#[test]
fn paper_figures_smoke_preset_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["make-paper-figures", "--preset", "smoke"]);
    ok(b.path(), &["make-paper-figures", "--preset", "smoke"]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert!(files.len() >= 10);
    for f in files {
        let rel = f["path"].as_str().unwrap();
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{rel} differs between runs"
        );
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );
}
