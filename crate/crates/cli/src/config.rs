//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use collab_mpc::costs::AgentWeights;
use collab_mpc::sim::{ParamGrid, Policy, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub sim: SimConfig,
    pub bench: BenchSection,
    pub noise: NoiseSection,
    pub tune: TuneSection,
    pub serve: ServeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            sim: SimConfig::default(),
            bench: BenchSection::default(),
            noise: NoiseSection::default(),
            tune: TuneSection::default(),
            serve: ServeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub trials: usize,
    pub policies: Vec<Policy>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { trials: 300, policies: Policy::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigmas_cm: Vec<f64>,
    pub per_sigma: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { sigmas_cm: vec![2.0, 5.0, 7.0, 10.0, 15.0], per_sigma: 50 }
    }
}

/// Calibration on synthetic reaches generated from `truth`, which the
/// search does not see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub grid: ParamGrid,
    pub truth: AgentWeights,
    pub train_reaches: usize,
    pub eval_reaches: usize,
    /// Steps per reach.
    pub horizon: usize,
    /// Per-axis Gaussian noise on the synthetic knots, meters.
    pub noise_sd: f64,
    pub agent_radius: f64,
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            grid: ParamGrid::default(),
            truth: AgentWeights {
                velocity: 2.0,
                acceleration: 0.5,
                obstacle: 50.0,
                goal: 1.0,
                goal_reward: 2.0,
                goal_sigma: 0.2,
                stop_velocity: 2.0,
                clearance: 0.02,
            },
            train_reaches: 26,
            eval_reaches: 3,
            horizon: 12,
            noise_sd: 0.01,
            agent_radius: 0.05,
        }
    }
}

/// Which world a sandbox session runs in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioChoice {
    /// A randomized scenario drawn from `sim.scenario` with this seed.
    Seed(u64),
    /// `"standard"` (one post beside the approach) or `"empty"`.
    Named(String),
}

impl Default for ScenarioChoice {
    fn default() -> Self {
        ScenarioChoice::Named("standard".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub rate_hz: f64,
    pub scenario: ScenarioChoice,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8765".into(), rate_hz: 10.0, scenario: ScenarioChoice::default() }
    }
}

impl ScenarioChoice {
    pub fn validate(&self) -> CliResult<()> {
        match self {
            ScenarioChoice::Named(n) if n != "standard" && n != "empty" => {
                Err(CliError::Config(format!("unknown scenario {n:?}; expected a seed, \"standard\" or \"empty\"")))
            }
            _ => Ok(()),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.sim.validate()?;
        if self.bench.trials == 0 {
            return Err(CliError::Config("bench.trials must be positive".into()));
        }
        if self.bench.policies.is_empty() {
            return Err(CliError::Config("bench.policies must not be empty".into()));
        }
        if self.noise.per_sigma == 0 || self.noise.sigmas_cm.is_empty() {
            return Err(CliError::Config("noise needs at least one sigma and one trial per sigma".into()));
        }
        if let Some(s) = self.noise.sigmas_cm.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(CliError::Config(format!("noise sigma must be non-negative, got {s}")));
        }
        let t = &self.tune;
        t.grid.validate()?;
        if t.train_reaches == 0 || t.horizon < 3 {
            return Err(CliError::Config("tune needs at least one training reach and horizon ≥ 3".into()));
        }
        if !(t.noise_sd >= 0.0) || !(t.agent_radius > 0.0) {
            return Err(CliError::Config("tune.noise_sd must be ≥ 0 and tune.agent_radius > 0".into()));
        }
        if !(self.serve.rate_hz > 0.0) || !self.serve.rate_hz.is_finite() {
            return Err(CliError::Config("serve.rate_hz must be positive".into()));
        }
        self.serve.scenario.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
