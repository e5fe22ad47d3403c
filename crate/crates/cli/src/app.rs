//! Argument parsing and dispatch. Flags override the config file, and the
//! merged config is validated before anything runs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use collab_mpc::sim::{ParamGrid, Policy};

use crate::commands;
use crate::config::{RunConfig, ScenarioChoice};
use crate::error::{CliError, CliResult};
use crate::serve;

#[derive(Debug, Parser)]
#[command(name = "collab", version, about = "Collaborative MPC handover experiments and live sandbox")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Base seed for scenario draws.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every policy on seeded scenarios and aggregate the metrics.
    Bench(BenchArgs),
    /// Success rate of the collaborative policy under observation noise.
    Noise(NoiseArgs),
    /// Grid-search the agent weights against synthetic reaches.
    Tune(TuneArgs),
    /// Replay one benchmark trial.
    Trial(TrialArgs),
    /// Serve the live sandbox over WebSocket.
    Serve(ServeArgs),
    /// Print the resolved configuration as TOML.
    Config,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    /// Comma-separated: ours, robot_only, attractor.
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<Policy>>,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    /// Comma-separated noise levels, cm.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Trials per noise level.
    #[arg(long)]
    pub per: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// `default` for the built-in 3⁸ grid, or a TOML file with one list per weight.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub eval: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrialArgs {
    /// Trial index within the benchmark drawn from `--seed`.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value = "ours")]
    pub policy: Policy,
    /// Observation noise, cm.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Also write the executed end-effector and agent paths as CSV.
    #[arg(long)]
    pub dump_paths: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; port 0 picks a free port.
    #[arg(long)]
    pub addr: Option<String>,
    /// Control loop rate, Hz.
    #[arg(long)]
    pub rate: Option<f64>,
    /// `standard`, `empty` or a scenario seed.
    #[arg(long)]
    pub scenario: Option<String>,
}

fn load_grid(spec: &str) -> CliResult<ParamGrid> {
    if spec == "default" {
        return Ok(ParamGrid::default());
    }
    let text = std::fs::read_to_string(spec).map_err(|e| CliError::Io(format!("{spec}: {e}")))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{spec}: {e}")))
}

impl Cli {
    /// Config file plus flag overrides, validated.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        match &self.command {
            Command::Bench(a) => {
                if let Some(n) = a.trials {
                    cfg.bench.trials = n;
                }
                if let Some(p) = &a.policies {
                    cfg.bench.policies = p.clone();
                }
            }
            Command::Noise(a) => {
                if let Some(s) = &a.sigmas {
                    cfg.noise.sigmas_cm = s.clone();
                }
                if let Some(n) = a.per {
                    cfg.noise.per_sigma = n;
                }
            }
            Command::Tune(a) => {
                if let Some(g) = &a.grid {
                    cfg.tune.grid = load_grid(g)?;
                }
                if let Some(n) = a.train {
                    cfg.tune.train_reaches = n;
                }
                if let Some(n) = a.eval {
                    cfg.tune.eval_reaches = n;
                }
            }
            Command::Serve(a) => {
                if let Some(addr) = &a.addr {
                    cfg.serve.addr = addr.clone();
                }
                if let Some(r) = a.rate {
                    cfg.serve.rate_hz = r;
                }
                if let Some(s) = &a.scenario {
                    cfg.serve.scenario = match s.parse::<u64>() {
                        Ok(seed) => ScenarioChoice::Seed(seed),
                        Err(_) => ScenarioChoice::Named(s.clone()),
                    };
                }
            }
            Command::Trial(_) | Command::Config => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run(&self) -> CliResult<()> {
        let cfg = self.resolve()?;
        log::debug!("config hash {}", cfg.hash());
        match &self.command {
            Command::Bench(_) => commands::bench(&cfg),
            Command::Noise(_) => commands::noise(&cfg),
            Command::Tune(_) => commands::tune(&cfg),
            Command::Trial(a) => commands::trial(&cfg, a.index, a.policy, a.sigma, a.dump_paths).map(|_| ()),
            Command::Serve(_) => tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(serve::serve(cfg)),
            Command::Config => {
                print!("{}", cfg.to_toml());
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("collab").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let cfg = parse(&["bench", "--trials", "5", "--seed", "7", "--policies", "ours,attractor"]).resolve().unwrap();
        assert_eq!(cfg.bench.trials, 5);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.bench.policies, vec![Policy::Ours, Policy::Attractor]);
    }

    #[test]
    fn noise_flags_parse_lists() {
        let cfg = parse(&["noise", "--sigmas", "2,5,7,10,15", "--per", "50"]).resolve().unwrap();
        assert_eq!(cfg.noise.sigmas_cm, vec![2.0, 5.0, 7.0, 10.0, 15.0]);
        assert_eq!(cfg.noise.per_sigma, 50);
    }

    #[test]
    fn validation_runs_after_overrides() {
        let e = parse(&["bench", "--trials", "0"]).resolve().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = parse(&["serve", "--scenario", "moon"]).resolve().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let cfg = parse(&["serve", "--scenario", "12"]).resolve().unwrap();
        assert_eq!(cfg.serve.scenario, ScenarioChoice::Seed(12));
    }

    #[test]
    fn default_grid_has_every_combination() {
        let cfg = parse(&["tune", "--grid", "default"]).resolve().unwrap();
        assert_eq!(cfg.tune.grid.len(), 6561);
        assert_eq!(parse(&["tune", "--grid", "/no/such/grid.toml"]).resolve().unwrap_err().exit_code(), 3);
    }

    #[test]
    fn unknown_policy_is_a_parse_error() {
        assert!(Cli::try_parse_from(["collab", "trial", "--policy", "psychic"]).is_err());
    }
}
