use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const QUICK: &str = r#"
[sim.scenario]
obstacle_count_min = 0
obstacle_count_max = 0

[sim.mpc]
horizon = 10
"#;

fn collab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn quick_dir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("quick.toml"), QUICK).unwrap();
    dir
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn bench_is_reproducible_and_echoes_the_config() {
    let dir = quick_dir();
    let args = ["--config", "quick.toml", "--output", "out", "bench", "--trials", "2", "--seed", "7"];
    ok(&collab(dir.path(), &args));
    let out = dir.path().join("out");
    let first = (read(&out, "bench_trials.csv"), read(&out, "bench_summary.json"));
    ok(&collab(dir.path(), &args));
    assert_eq!(first, (read(&out, "bench_trials.csv"), read(&out, "bench_summary.json")));

    let summary: serde_json::Value = serde_json::from_str(&first.1).unwrap();
    let hash = summary["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(summary["config"]["seed"], 7);
    assert_eq!(summary["config"]["bench"]["trials"], 2);
    assert_eq!(summary["result"]["trial_seeds"].as_array().unwrap().len(), 2);
    assert_eq!(summary["result"]["summary"].as_array().unwrap().len(), 3);

    let mut csv = csv::Reader::from_reader(first.0.as_bytes());
    let headers = csv.headers().unwrap().clone();
    for col in ["trial", "policy", "success", "handover_time_normalized", "mean_jerk_cm", "config_hash"] {
        assert!(headers.iter().any(|h| h == col), "missing column {col}");
    }
    let hash_col = headers.iter().position(|h| h == "config_hash").unwrap();
    let rows: Vec<_> = csv.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| &r[hash_col] == hash));
}

#[test]
fn zero_trials_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = collab(dir.path(), &["bench", "--trials", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trials"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_config_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = collab(dir.path(), &["--config", "nope.toml", "bench"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[bench]\ntrails = 3\n").unwrap();
    let out = collab(dir.path(), &["--config", "bad.toml", "bench"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn printed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = collab(dir.path(), &["--seed", "11", "config"]);
    ok(&out);
    fs::write(dir.path().join("resolved.toml"), &out.stdout).unwrap();
    let again = collab(dir.path(), &["--config", "resolved.toml", "config"]);
    ok(&again);
    assert_eq!(out.stdout, again.stdout);
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed = 11"));
}

#[test]
fn trial_dumps_one_row_per_cycle() {
    let dir = quick_dir();
    let out = collab(dir.path(), &["--config", "quick.toml", "trial", "--seed", "42", "--policy", "ours", "--dump-paths"]);
    ok(&out);
    let trial: serde_json::Value = serde_json::from_str(&read(&dir.path().join("out"), "trial.json")).unwrap();
    let result = &trial["result"]["trial"];
    assert_eq!(result["policy"], "ours");
    let cycles = match result["t_success"].as_u64() {
        Some(t) => t,
        None => 2 * result["t_uncontrolled"].as_u64().unwrap(),
    };
    let paths = read(&dir.path().join("out"), "trial_paths.csv");
    let mut csv = csv::Reader::from_reader(paths.as_bytes());
    assert_eq!(csv.headers().unwrap().iter().next(), Some("step"));
    let rows: Vec<_> = csv.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len() as u64, cycles);
    assert_eq!(&rows[0][0], "1");
    assert_eq!(rows.last().unwrap()[0].parse::<u64>().unwrap(), cycles);
}

#[test]
fn trial_without_dump_writes_only_the_summary() {
    let dir = quick_dir();
    ok(&collab(dir.path(), &["--config", "quick.toml", "trial", "--policy", "attractor", "--sigma", "2"]));
    assert!(dir.path().join("out/trial.json").exists());
    assert!(!dir.path().join("out/trial_paths.csv").exists());
}

#[test]
fn noise_table_has_one_row_per_sigma() {
    let dir = quick_dir();
    ok(&collab(dir.path(), &["--config", "quick.toml", "noise", "--sigmas", "2,5", "--per", "1"]));
    let table = read(&dir.path().join("out"), "noise_table.csv");
    let mut csv = csv::Reader::from_reader(table.as_bytes());
    let rows: Vec<_> = csv.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "2.0");
    let trials = read(&dir.path().join("out"), "noise_trials.csv");
    assert_eq!(trials.lines().count(), 1 + 2);
    assert!(dir.path().join("out/noise_summary.json").exists());
}

#[test]
fn negative_sigma_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = collab(dir.path(), &["noise", "--sigmas=-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tune_writes_a_ranked_leaderboard() {
    let dir = tempfile::tempdir().unwrap();
    let grid = "velocity = [1.0, 2.0]\nacceleration = [0.5]\nobstacle = [50.0]\ngoal = [1.0]\n\
                goal_reward = [2.0]\ngoal_sigma = [0.2]\nstop_velocity = [2.0]\nclearance = [0.02]\n";
    fs::write(dir.path().join("grid.toml"), grid).unwrap();
    fs::write(dir.path().join("tune.toml"), "[tune]\nnoise_sd = 0.002\n").unwrap();
    ok(&collab(dir.path(), &["--config", "tune.toml", "tune", "--grid", "grid.toml", "--train", "2", "--eval", "1"]));
    let board = read(&dir.path().join("out"), "tune_leaderboard.csv");
    let mut csv = csv::Reader::from_reader(board.as_bytes());
    let rows: Vec<_> = csv.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    let loss: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(loss[0] <= loss[1]);
    // The held-out truth has velocity 2.
    assert_eq!(&rows[0][3], "2.0");
    let result: serde_json::Value = serde_json::from_str(&read(&dir.path().join("out"), "tune_result.json")).unwrap();
    assert_eq!(result["result"]["evaluated"], 2);
    assert!(result["result"]["eval_loss_cm"].as_f64().unwrap() < 2.0);
}
