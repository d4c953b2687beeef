//! The command-line surface: config precedence, sweeps, and exit codes of
//! the installed binary.

use std::path::Path;
use std::process::Command;

use detach::cli::{parse_config, run, sweep, RunConfig, DEFAULT_THRESHOLDS};
use detach::envs::EnvKind;
use detach::metrics::read_csv;
use detach::Error;

fn small(dir: &Path) -> RunConfig {
    parse_config(&[
        "--env",
        "gridworld:3",
        "--workers",
        "2",
        "--envs-per-worker",
        "2",
        "--total-timesteps",
        "1024",
        "--steps-per-rollout",
        "16",
        "--minibatches",
        "2",
        "--lr",
        "0.05",
        "--metrics-path",
        dir.join("m.csv").to_str().unwrap(),
    ])
    .unwrap()
}

#[test]
fn flags_override_file_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.conf");
    std::fs::write(
        &file,
        "# experiment\nworkers = 3\nkl_threshold=0.2\nenv = gridworld:6\n\nlr = 0.01\n",
    )
    .unwrap();
    let c = parse_config(&["--config", file.to_str().unwrap(), "--workers", "5"]).unwrap();
    assert_eq!(c.workers, 5);
    assert_eq!(c.kl_threshold, 0.2);
    assert_eq!(c.env, EnvKind::GridWorld(6));
    assert_eq!(c.ppo.learning_rate, 0.01);
    assert_eq!(c.envs_per_worker, 64);

    std::fs::write(&file, "workers = many\n").unwrap();
    assert!(matches!(
        parse_config(&["--config", file.to_str().unwrap()]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        parse_config(&["--kl-threshold", "-1"]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        parse_config(&["--bogus", "1"]),
        Err(Error::Config(_))
    ));
    // The step budget must cover one full rollout of every environment.
    assert!(matches!(
        parse_config(&["--total-timesteps", "100"]),
        Err(Error::Config(_))
    ));
}

#[test]
fn sweep_writes_one_csv_per_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path());
    let rows = sweep(&base, &DEFAULT_THRESHOLDS).unwrap();
    assert_eq!(rows.len(), 8);
    for (row, d) in rows.iter().zip(DEFAULT_THRESHOLDS) {
        assert_eq!(row.kl_threshold, d);
        assert!(row.metrics_path.exists(), "{}", row.metrics_path.display());
        assert!(!read_csv(&row.metrics_path).unwrap().is_empty());
    }
    let table = std::fs::read_to_string(dir.path().join("m_sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 9);
}

#[test]
fn single_threshold_sweep_equals_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = small(dir.path());
    base.kl_threshold = 0.01;
    let rows = sweep(&base, &[0.01]).unwrap();
    let swept = std::fs::read(&rows[0].metrics_path).unwrap();

    let summary = run(&base).unwrap();
    let direct = std::fs::read(&base.metrics_path).unwrap();
    assert_eq!(swept, direct);
    assert_eq!(rows[0].total_syncs, summary.total_syncs());
    assert_eq!(rows[0].weight_bytes, summary.weight_bytes);
    assert_eq!(rows[0].final_mean_return, summary.final_mean_return);
}

fn detach(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_detach"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("ok.csv");
    let common = [
        "--env",
        "gridworld:3",
        "--workers",
        "1",
        "--envs-per-worker",
        "2",
        "--steps-per-rollout",
        "16",
        "--minibatches",
        "2",
        "--total-timesteps",
        "256",
    ];

    let mut ok = vec!["run"];
    ok.extend(common);
    ok.extend(["--metrics-path", metrics.to_str().unwrap()]);
    let out = detach(&ok);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(metrics.exists());

    assert_eq!(detach(&["run", "--workers", "0"]).status.code(), Some(2));
    assert_eq!(detach(&["run", "--env", "pong"]).status.code(), Some(2));
    assert_eq!(detach(&["run", "--no-such-flag"]).status.code(), Some(2));

    // A metrics path under a regular file cannot be created: a runtime error.
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let bad = blocker.join("m.csv");
    let mut failing = vec!["run"];
    failing.extend(common);
    failing.extend(["--metrics-path", bad.to_str().unwrap()]);
    assert_eq!(detach(&failing).status.code(), Some(3));

    // A worker with nobody to talk to.
    let out = detach(&[
        "worker",
        "--connect",
        "127.0.0.1:1",
        "--worker-id",
        "0",
        "--env",
        "cartpole",
        "--envs-per-worker",
        "1",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
}
