use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tweedie_avb::avb::FitResult;
use tweedie_avb::cli::SummaryReport;
use tweedie_avb::evaluation::GiniMatrix;

const SAMPLE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample.csv");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tweedie-avb"))
        .args(args)
        .env("RUST_LOG", "warn")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

/// A short fit of the bundled sample into `dir/fit`.
fn quick_fit(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("fit");
    let mut args = vec!["--data", SAMPLE, "--out", out.to_str().unwrap(), "--steps", "120"];
    args.extend_from_slice(extra);
    args.push("fit");
    ok(dir, &args);
    out
}

#[test]
fn simulate_writes_rows_and_truth_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("c.json"), r#"{"truth": {"n_obs": 300}}"#);
    for out in ["a", "b"] {
        ok(dir.path(), &["--config", cfg.to_str().unwrap(), "--seed", "4", "--out", out, "simulate"]);
    }
    let a = fs::read(dir.path().join("a/data.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/data.csv")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a/truth.json")).unwrap(),
        fs::read(dir.path().join("b/truth.json")).unwrap()
    );
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 301);
}

#[test]
fn simulate_with_no_rows_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("c.json"), r#"{"truth": {"n_obs": 0}}"#);
    let out = run(dir.path(), &["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_obs"));
}

#[test]
fn fit_is_reproducible_from_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = quick_fit(dir.path(), &[]);
    assert!(first.join("fit.json").exists());
    let echoed = first.join("fit_config.json");
    ok(dir.path(), &["--config", echoed.to_str().unwrap(), "--out", "again", "fit"]);
    let again = dir.path().join("again");
    assert_eq!(
        fs::read(first.join("trace.csv")).unwrap(),
        fs::read(again.join("trace.csv")).unwrap()
    );
    assert_eq!(
        fs::read(first.join("fit.json")).unwrap(),
        fs::read(again.join("fit.json")).unwrap()
    );
}

#[test]
fn fit_with_mcmc_writes_a_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("c.json"),
        r#"{"chain": {"iterations": 600, "burn_in": 100, "thinning": 1}}"#,
    );
    ok(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "--data", SAMPLE, "--out", "m", "--steps", "60", "fit", "--mcmc"],
    );
    let chain = tweedie_avb::mcmc::ChainResult::load(dir.path().join("m/chain.json")).unwrap();
    assert_eq!(chain.draws.len(), 500);
}

#[test]
fn numerical_abort_exits_with_two_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("c.json"),
        r#"{"train": {"inference_optimizer": {"learning_rate": 50.0}}}"#,
    );
    let out = run(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "--data", SAMPLE, "--out", ".", "--steps", "50", "fit"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint.json"));
    assert!(dir.path().join("checkpoint.json").exists());
}

#[test]
fn evaluate_writes_matrix_curves_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let fit_dir = quick_fit(dir.path(), &[]);
    let fit_json = fit_dir.join("fit.json");
    let cfg = write(
        &dir.path().join("eval.json"),
        &format!(
            r#"{{"evaluate": {{"extra_models": [{{"name": "again", "fit": {:?}}}]}}}}"#,
            fit_json.to_str().unwrap()
        ),
    );
    ok(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "--data", SAMPLE, "--out", "fit", "evaluate"],
    );

    let matrix: GiniMatrix = serde_json::from_str(&fs::read_to_string(fit_dir.join("gini_matrix.json")).unwrap()).unwrap();
    assert_eq!(matrix.names, ["intercept", "avb", "again"]);
    assert_eq!(matrix.get(1, 2), Some(0.0));
    assert_eq!(matrix.get(2, 1), Some(0.0));
    assert!(matrix.standard_errors.as_ref().unwrap()[0][1].is_some());
    let csv = fs::read_to_string(fit_dir.join("gini_matrix.csv")).unwrap();
    assert!(csv.starts_with("baseline,intercept,avb,again\n"));
    for pair in ["intercept_avb", "avb_intercept", "avb_again"] {
        assert!(fit_dir.join(format!("lorenz_{pair}.csv")).exists(), "{pair}");
    }

    let fit = FitResult::load(&fit_json).unwrap();
    let summary: SummaryReport =
        serde_json::from_str(&fs::read_to_string(fit_dir.join("posterior_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.p_index.mean, fit.draws.mean_of("p_index").unwrap());
    let hist = fs::read_to_string(fit_dir.join("posterior_p_hist.csv")).unwrap();
    let total: usize = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, fit.draws.len());
}

#[test]
fn evaluate_without_a_fit_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--data", SAMPLE, "--out", "nowhere", "evaluate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fit.json"));
}

#[test]
fn predict_covers_every_row_and_unseen_groups() {
    let dir = tempfile::tempdir().unwrap();
    let fit_dir = quick_fit(dir.path(), &[]);
    ok(dir.path(), &["--data", SAMPLE, "--out", "fit", "predict"]);
    let text = fs::read_to_string(fit_dir.join("predictions.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row,mean,q05,q50,q95"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 200);
    for r in &rows {
        assert!(r[2] <= r[3] && r[3] <= r[4], "{r:?}");
    }

    let fresh = write(&dir.path().join("new.csv"), "y,x1,x2,group\n0,0.5,-1,never_seen\n1.5,0,0,g01\n");
    ok(dir.path(), &["--data", fresh.to_str().unwrap(), "--out", "fit", "predict"]);
    assert_eq!(fs::read_to_string(fit_dir.join("predictions.csv")).unwrap().lines().count(), 3);
}

#[test]
fn predict_rejects_different_columns_by_name() {
    let dir = tempfile::tempdir().unwrap();
    quick_fit(dir.path(), &[]);
    let other = write(&dir.path().join("other.csv"), "y,x1,x3,group\n0,0.5,-1,g01\n");
    let out = run(dir.path(), &["--data", other.to_str().unwrap(), "--out", "fit", "predict"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("x2") && err.contains("x3"), "{err}");
}
