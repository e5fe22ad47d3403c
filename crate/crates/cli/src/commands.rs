//! Batch drivers over the simulation harness. Every artifact carries the
//! resolved config hash; JSON artifacts also embed the config itself.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use collab_mpc::kinematics::franka_like;
use collab_mpc::sim::{
    default_calibration_world, derive_seed, evaluate_config, grid_search_tune, synthetic_reaches, Policy, Simulator,
    TrialResult,
};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

fn simulator(cfg: &RunConfig) -> CliResult<Simulator> {
    Ok(Simulator::new(Arc::new(franka_like()), cfg.sim.clone())?)
}

fn out_path(cfg: &RunConfig, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Io(format!("{}: {e}", cfg.output_dir.display())))?;
    Ok(cfg.output_dir.join(name))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// CSV with a trailing `config_hash` column on every row.
fn write_csv<R: Serialize>(path: &Path, rows: &[R], hash: &str) -> CliResult<()> {
    #[derive(Serialize)]
    struct Row<'a, R> {
        #[serde(flatten)]
        row: &'a R,
        config_hash: &'a str,
    }
    let file = fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for (i, row) in rows.iter().enumerate() {
        // Flattened structs need maps, which csv only writes without headers.
        let value = serde_json::to_value(Row { row, config_hash: hash })?;
        let obj = value.as_object().expect("rows are structs");
        if i == 0 {
            w.write_record(obj.keys())?;
        }
        w.write_record(obj.values().map(cell))?;
    }
    w.flush()?;
    Ok(())
}

fn cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn envelope(cfg: &RunConfig, kind: &str, body: serde_json::Value) -> serde_json::Value {
    json!({ "kind": kind, "config_hash": cfg.hash(), "config": cfg, "result": body })
}

fn fmt_ms(mean: f64, std: f64) -> String {
    if mean.is_nan() {
        "n/a".into()
    } else {
        format!("{mean:.3} ± {std:.3}")
    }
}

pub fn bench(cfg: &RunConfig) -> CliResult<()> {
    let sim = simulator(cfg)?;
    let b = sim.run_benchmark(cfg.bench.trials, &cfg.bench.policies, cfg.seed)?;
    let hash = cfg.hash();
    write_csv(&out_path(cfg, "bench_trials.csv")?, &b.results, &hash)?;
    write_json(&out_path(cfg, "bench_summary.json")?, &envelope(cfg, "bench", serde_json::to_value(&b)?))?;
    println!("{} trials, {} mutual successes, config {}", b.n_trials, b.mutual_trials.len(), &hash[..12]);
    println!(
        "{:<11} {:>8} {:>16} {:>16} {:>18} {:>18}",
        "policy", "success", "time (norm.)", "length error", "accel cm/s²", "jerk cm/s³"
    );
    for s in &b.summary {
        println!(
            "{:<11} {:>7.1}% {:>16} {:>16} {:>18} {:>18}",
            s.policy.as_str(),
            100.0 * s.success_rate,
            fmt_ms(s.time_mean, s.time_std),
            fmt_ms(s.length_error_mean, s.length_error_std),
            fmt_ms(s.acceleration_mean, s.acceleration_std),
            fmt_ms(s.jerk_mean, s.jerk_std),
        );
    }
    Ok(())
}

pub fn noise(cfg: &RunConfig) -> CliResult<()> {
    let sim = simulator(cfg)?;
    let (rows, results) = sim.run_noise_sweep(&cfg.noise.sigmas_cm, cfg.noise.per_sigma, cfg.seed)?;
    let hash = cfg.hash();
    write_csv(&out_path(cfg, "noise_table.csv")?, &rows, &hash)?;
    write_csv(&out_path(cfg, "noise_trials.csv")?, &results, &hash)?;
    write_json(&out_path(cfg, "noise_summary.json")?, &envelope(cfg, "noise", json!({ "rows": rows })))?;
    println!("{:>9} {:>8} {:>10}", "sigma cm", "trials", "success");
    for r in &rows {
        println!("{:>9} {:>8} {:>9.0}%", r.sigma_cm, r.trials, r.success_rate_pct);
    }
    Ok(())
}

#[derive(Serialize)]
struct LeaderRow {
    rank: usize,
    index: usize,
    loss_cm: f64,
    velocity: f64,
    acceleration: f64,
    obstacle: f64,
    goal: f64,
    goal_reward: f64,
    goal_sigma: f64,
    stop_velocity: f64,
    clearance: f64,
}

pub fn tune(cfg: &RunConfig) -> CliResult<()> {
    let t = &cfg.tune;
    let dt = cfg.sim.mpc.dt;
    let gen = |n, seed| {
        synthetic_reaches(default_calibration_world(), t.agent_radius, &t.truth, n, t.horizon, dt, t.noise_sd, seed)
    };
    let train = gen(t.train_reaches, derive_seed(cfg.seed, 0))?;
    let result = grid_search_tune(&t.grid, &train)?;
    let eval_loss_cm = if t.eval_reaches > 0 {
        Some(evaluate_config(&gen(t.eval_reaches, derive_seed(cfg.seed, 1))?, &result.best)?)
    } else {
        None
    };
    let rows: Vec<LeaderRow> = result
        .leaderboard
        .iter()
        .enumerate()
        .map(|(rank, e)| LeaderRow {
            rank,
            index: e.index,
            loss_cm: e.loss_cm,
            velocity: e.weights.velocity,
            acceleration: e.weights.acceleration,
            obstacle: e.weights.obstacle,
            goal: e.weights.goal,
            goal_reward: e.weights.goal_reward,
            goal_sigma: e.weights.goal_sigma,
            stop_velocity: e.weights.stop_velocity,
            clearance: e.weights.clearance,
        })
        .collect();
    let hash = cfg.hash();
    write_csv(&out_path(cfg, "tune_leaderboard.csv")?, &rows, &hash)?;
    let body = json!({
        "evaluated": result.evaluated,
        "best": result.best,
        "train_loss_cm": result.best_loss_cm,
        "eval_loss_cm": eval_loss_cm,
    });
    write_json(&out_path(cfg, "tune_result.json")?, &envelope(cfg, "tune", body))?;
    println!("evaluated {} configurations", result.evaluated);
    println!("best train loss {:.3} cm", result.best_loss_cm);
    if let Some(e) = eval_loss_cm {
        println!("held-out loss {e:.3} cm");
    }
    println!("best weights {}", serde_json::to_string(&result.best)?);
    Ok(())
}

/// One row per executed control cycle; the start pose lives in trial.json.
#[derive(Serialize)]
struct PathRow {
    step: usize,
    ee_x: f64,
    ee_y: f64,
    ee_z: f64,
    agent_x: f64,
    agent_y: f64,
    agent_z: f64,
}

/// Replays trial `index` of the benchmark drawn from the configured seed.
pub fn trial(cfg: &RunConfig, index: usize, policy: Policy, sigma_cm: f64, dump_paths: bool) -> CliResult<TrialResult> {
    let sim = simulator(cfg)?;
    let prepared = sim.prepare_trial(index, derive_seed(cfg.seed, index as u64))?;
    let run = sim.run_trial(&prepared, policy, sigma_cm)?;
    let hash = cfg.hash();
    let body = json!({
        "trial": run.result,
        "redraws": prepared.redraws,
        "obstacles": prepared.scenario.world.primitives,
        "agent_start": prepared.scenario.agent_start,
        "agent_goal": prepared.scenario.agent_goal,
        "robot_start": prepared.scenario.robot_start,
        "ee_start": run.ee_path[0],
    });
    write_json(&out_path(cfg, "trial.json")?, &envelope(cfg, "trial", body))?;
    if dump_paths {
        let rows: Vec<PathRow> = run
            .ee_path
            .iter()
            .zip(&run.agent_path)
            .enumerate()
            .skip(1)
            .map(|(step, (e, a))| PathRow { step, ee_x: e.x, ee_y: e.y, ee_z: e.z, agent_x: a.x, agent_y: a.y, agent_z: a.z })
            .collect();
        write_csv(&out_path(cfg, "trial_paths.csv")?, &rows, &hash)?;
    }
    let r = &run.result;
    match r.t_success {
        Some(t) => println!(
            "{} succeeded after {t} of {} uncontrolled steps (normalized time {:.3})",
            policy,
            r.t_uncontrolled,
            r.handover_time_normalized.unwrap_or(f64::NAN)
        ),
        None => println!("{} failed; final distance {:.1} cm", policy, r.final_distance_cm),
    }
    Ok(run.result)
}
