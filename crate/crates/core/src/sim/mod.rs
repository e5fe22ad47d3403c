//! Handover simulation: randomized scenarios, baseline policies, metrics,
//! the benchmark and noise sweep, and predictor calibration.
//!
//! All internal math is in meters; reported metrics are in centimeters.

mod calibration;

pub use calibration::{
    default_calibration_world, evaluate_config, grid_search_tune, predict_from, prediction_loss, synthetic_reaches,
    CalibrationSet, ParamGrid, Reach, TuneEntry, TuneResult,
};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::DEFAULT_AGENT_RADIUS;
use crate::costs::{AccelerationFactor, AnchorFactor, SphereObstacleFactor, VelocityFactor, Weights};
use crate::error::{Error, Result};
use crate::geometry::{ObstacleWorld, Primitive};
use crate::kinematics::{franka_ready, SerialChain};
use crate::mpc::{AgentModel, MpcConfig, MpcController, Observation, Phase, ENGAGE_THRESHOLD};
use crate::solver::{solve_lm, NlsProblem, SolverOptions, VariableLayout};
use crate::trajectory::Trajectory;

/// SplitMix64 step; derives independent per-trial seeds from one base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Vector3<f64> {
    Vector3::from_fn(|i, _| if hi[i] > lo[i] { rng.gen_range(lo[i]..hi[i]) } else { lo[i] })
}

/// Ranges scenarios are drawn from. Robot base at the origin, +x toward
/// the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub agent_start_min: Vector3<f64>,
    pub agent_start_max: Vector3<f64>,
    pub agent_goal_min: Vector3<f64>,
    pub agent_goal_max: Vector3<f64>,
    pub obstacle_center_min: Vector3<f64>,
    pub obstacle_center_max: Vector3<f64>,
    pub obstacle_count_min: usize,
    pub obstacle_count_max: usize,
    /// Half extents of the wall facing the robot.
    pub wall_half_min: Vector3<f64>,
    pub wall_half_max: Vector3<f64>,
    /// Multiplies every primitive size.
    pub obstacle_scale: f64,
    /// Uniform per-joint perturbation of the ready pose, radians.
    pub robot_joint_jitter: f64,
    pub agent_radius: f64,
    pub workspace_min: Vector3<f64>,
    pub workspace_max: Vector3<f64>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            agent_start_min: Vector3::new(1.05, -0.30, 0.30),
            agent_start_max: Vector3::new(1.30, 0.30, 0.60),
            agent_goal_min: Vector3::new(0.45, -0.25, 0.30),
            agent_goal_max: Vector3::new(0.60, 0.25, 0.60),
            obstacle_center_min: Vector3::new(0.75, -0.10, 0.35),
            obstacle_center_max: Vector3::new(0.90, 0.10, 0.55),
            obstacle_count_min: 2,
            obstacle_count_max: 4,
            wall_half_min: Vector3::new(0.03, 0.08, 0.08),
            wall_half_max: Vector3::new(0.06, 0.20, 0.20),
            obstacle_scale: 1.0,
            robot_joint_jitter: 0.15,
            agent_radius: DEFAULT_AGENT_RADIUS,
            workspace_min: Vector3::new(-0.2, -0.8, 0.0),
            workspace_max: Vector3::new(1.6, 0.8, 1.2),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("agent_start", &self.agent_start_min, &self.agent_start_max),
            ("agent_goal", &self.agent_goal_min, &self.agent_goal_max),
            ("obstacle_center", &self.obstacle_center_min, &self.obstacle_center_max),
            ("wall_half", &self.wall_half_min, &self.wall_half_max),
            ("workspace", &self.workspace_min, &self.workspace_max),
        ];
        for (name, lo, hi) in pairs {
            if lo.iter().zip(hi.iter()).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
                return Err(Error::Config(format!("scenario.{name}_min must not exceed {name}_max")));
            }
        }
        if self.obstacle_count_min > self.obstacle_count_max {
            return Err(Error::Config("scenario.obstacle_count_min exceeds obstacle_count_max".into()));
        }
        for (name, v) in [("obstacle_scale", self.obstacle_scale), ("agent_radius", self.agent_radius)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("scenario.{name} must be positive")));
            }
        }
        if !(self.robot_joint_jitter >= 0.0) {
            return Err(Error::Config("scenario.robot_joint_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// How the agent's independent (uncontrolled) plan is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncontrolledSpec {
    /// Steps from start to goal.
    pub horizon: usize,
    pub goal_weight: f64,
    pub obstacle_weight: f64,
    pub velocity_weight: f64,
    pub acceleration_weight: f64,
    /// Half-width of the uniform per-axis knot noise, meters.
    pub noise_amplitude: f64,
    /// Penetration beyond which a scenario is redrawn, meters.
    pub max_penetration: f64,
}

impl Default for UncontrolledSpec {
    fn default() -> Self {
        Self {
            horizon: 20,
            goal_weight: 1e4,
            obstacle_weight: 1e3,
            velocity_weight: 1.0,
            acceleration_weight: 0.5,
            noise_amplitude: 0.01,
            max_penetration: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub scenario: ScenarioSpec,
    pub uncontrolled: UncontrolledSpec,
    pub max_redraws: usize,
    pub attractor_horizon: usize,
    /// Scales the chain's joint velocity limits; arms sharing space with
    /// people run below rated speed.
    pub robot_speed_scale: f64,
    pub mpc: MpcConfig,
    pub weights: Weights,
}

impl Default for SimConfig {
    fn default() -> Self {
        let mut mpc = MpcConfig::default();
        // Wall-clock caps make results machine-dependent.
        mpc.solver.time_budget = None;
        Self {
            scenario: ScenarioSpec::default(),
            uncontrolled: UncontrolledSpec::default(),
            max_redraws: 100,
            attractor_horizon: 5,
            robot_speed_scale: 1.0,
            mpc,
            weights: Weights::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.mpc.validate()?;
        self.weights.validate()?;
        let u = &self.uncontrolled;
        if u.horizon < 1 {
            return Err(Error::Config("uncontrolled.horizon must be at least 1".into()));
        }
        for (name, v) in [
            ("goal_weight", u.goal_weight),
            ("obstacle_weight", u.obstacle_weight),
            ("velocity_weight", u.velocity_weight),
            ("acceleration_weight", u.acceleration_weight),
            ("noise_amplitude", u.noise_amplitude),
            ("max_penetration", u.max_penetration),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("uncontrolled.{name} must be finite and non-negative")));
            }
        }
        if self.max_redraws == 0 {
            return Err(Error::Config("max_redraws must be positive".into()));
        }
        if !(self.robot_speed_scale > 0.0) || !self.robot_speed_scale.is_finite() {
            return Err(Error::Config("robot_speed_scale must be positive".into()));
        }
        if self.attractor_horizon < 1 {
            return Err(Error::Config("attractor_horizon must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub world: ObstacleWorld,
    pub agent_start: Vector3<f64>,
    pub agent_goal: Vector3<f64>,
    pub agent_radius: f64,
    pub robot_start: DVector<f64>,
    pub workspace_min: Vector3<f64>,
    pub workspace_max: Vector3<f64>,
}

/// A scenario with its agent replay path.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTrial {
    pub trial: usize,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub uncontrolled: Trajectory,
    pub redraws: usize,
}

impl PreparedTrial {
    /// Steps the agent needs to reach its goal.
    pub fn t_uncontrolled(&self) -> usize {
        self.uncontrolled.len() - 1
    }

    /// Actual agent position at step `k`; it waits at the goal afterwards.
    pub fn agent_at(&self, k: usize) -> Vector3<f64> {
        let p = self.uncontrolled.knot(k.min(self.uncontrolled.len() - 1));
        Vector3::new(p[0], p[1], p[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Full collaborative MPC.
    Ours,
    /// MPC with the agent held at its observed position.
    RobotOnly,
    /// Collaborative MPC with a very short horizon.
    Attractor,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Ours, Policy::RobotOnly, Policy::Attractor];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Ours => "ours",
            Policy::RobotOnly => "robot_only",
            Policy::Attractor => "attractor",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}; expected ours, robot_only or attractor")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub handover_time_normalized: f64,
    pub trajectory_length_error: f64,
    /// Mean ‖second central difference‖ of the ee path, cm/s².
    pub mean_acceleration_cm: f64,
    /// Mean ‖third central difference‖ of the ee path, cm/s³.
    pub mean_jerk_cm: f64,
}

/// Metrics of a successful handover whose ee path has `T_success + 1`
/// points. Paths too short for a difference stencil report zero for it.
pub fn compute_metrics(ee_path: &[Vector3<f64>], dt: f64, t_uncontrolled: usize) -> Metrics {
    let t_success = ee_path.len().saturating_sub(1) as f64;
    let ratio = t_success / t_uncontrolled.max(1) as f64;
    let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let n = ee_path.len();
    let acc: Vec<f64> = (1..n.saturating_sub(1))
        .map(|i| ((ee_path[i + 1] - 2.0 * ee_path[i] + ee_path[i - 1]) / (dt * dt)).norm())
        .collect();
    let jerk: Vec<f64> = (2..n.saturating_sub(2))
        .map(|i| {
            let p = ee_path;
            ((p[i + 2] - 2.0 * p[i + 1] + 2.0 * p[i - 1] - p[i - 2]) / (2.0 * dt * dt * dt)).norm()
        })
        .collect();
    Metrics {
        handover_time_normalized: ratio,
        trajectory_length_error: (1.0 - ratio).abs(),
        mean_acceleration_cm: 100.0 * mean(acc),
        mean_jerk_cm: 100.0 * mean(jerk),
    }
}

/// One row of the per-trial CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub policy: Policy,
    pub sigma_cm: f64,
    pub success: bool,
    pub t_uncontrolled: usize,
    pub t_success: Option<usize>,
    pub handover_time_normalized: Option<f64>,
    pub trajectory_length_error: Option<f64>,
    pub mean_acceleration_cm: Option<f64>,
    pub mean_jerk_cm: Option<f64>,
    pub final_distance_cm: f64,
}

/// A trial result with the executed paths.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRun {
    pub result: TrialResult,
    pub ee_path: Vec<Vector3<f64>>,
    pub agent_path: Vec<Vector3<f64>>,
}

/// Solves the agent's independent plan from start to goal, then adds
/// uniform knot noise. Knot 0 stays exact.
pub fn generate_uncontrolled_trajectory(
    sc: &ScenarioConfig,
    spec: &UncontrolledSpec,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let knots = spec.horizon + 1;
    let (a, b) = (sc.agent_start, sc.agent_goal);
    let mut layout = VariableLayout::default();
    let mut values = Vec::with_capacity(knots);
    for t in 0..knots {
        let id = layout.push(3, (t, 0));
        layout.blocks[id].fixed = t == 0;
        let s = t as f64 / (knots - 1) as f64;
        values.push(DVector::from_column_slice((a + (b - a) * s).as_slice()));
    }
    let world = Arc::new(sc.world.clone());
    let mut nls = NlsProblem::new(layout);
    let goal = DVector::from_column_slice(b.as_slice());
    if spec.goal_weight > 0.0 {
        nls.add(AnchorFactor::new(knots - 1, goal, spec.goal_weight));
    }
    for t in 1..knots {
        if spec.obstacle_weight > 0.0 {
            nls.add(SphereObstacleFactor::new(t, world.clone(), sc.agent_radius, spec.obstacle_weight));
        }
        if t + 1 < knots {
            let keys = [t - 1, t, t + 1];
            if spec.velocity_weight > 0.0 {
                nls.add(VelocityFactor::new(keys, dt, spec.velocity_weight));
            }
            if spec.acceleration_weight > 0.0 {
                nls.add(AccelerationFactor::new(keys, dt, spec.acceleration_weight));
            }
        }
    }
    if knots > 1 {
        let opts = SolverOptions { max_iters: 200, ..SolverOptions::default() };
        solve_lm(&nls, &mut values, &opts)?;
    }

    let penetration = values
        .iter()
        .map(|p| sc.agent_radius - sc.world.signed_distance(&Vector3::new(p[0], p[1], p[2])))
        .fold(0.0, f64::max);
    if penetration > spec.max_penetration {
        return Err(Error::InfeasibleScenario { penetration });
    }
    let amp = spec.noise_amplitude;
    for p in values.iter_mut().skip(1) {
        for x in p.iter_mut() {
            if amp > 0.0 {
                *x += rng.gen_range(-amp..=amp);
            }
        }
    }
    if knots == 1 {
        values.push(values[0].clone());
    }
    Trajectory::new(values, dt)
}

/// Closed-loop run toward a stationary agent, comparing execution with the
/// first cycle's plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRun {
    pub cycle0_plan: Vec<Vector3<f64>>,
    pub executed: Vec<Vector3<f64>>,
    /// Mean distance between executed and cycle-0 planned ee, same step.
    pub mean_deviation: f64,
    pub time_to_engage: Option<usize>,
    pub plan_steps: usize,
}

/// Franka at ready, a stationary hand ahead and to the side, and a post
/// partially blocking the straight approach.
pub fn standard_obstacle_fixture() -> (ObstacleWorld, DVector<f64>, Vector3<f64>) {
    let world = ObstacleWorld::new(vec![Primitive::Box {
        center: Vector3::new(0.48, -0.05, 0.35),
        half_extents: Vector3::new(0.04, 0.06, 0.35),
    }])
    .expect("valid fixture");
    (world, franka_ready(), Vector3::new(0.62, -0.25, 0.45))
}

pub fn spatial_consistency_run(
    chain: Arc<SerialChain>,
    world: Arc<ObstacleWorld>,
    q0: &DVector<f64>,
    agent: Vector3<f64>,
    weights: Weights,
    config: MpcConfig,
    max_cycles: usize,
) -> Result<ConsistencyRun> {
    let plan_steps = config.horizon + 1;
    let dt = config.dt;
    let mut ctrl = MpcController::new(chain.clone(), world, weights, config)?;
    let ee = |q: &DVector<f64>| chain.forward_kinematics(q).map(|p| p.translation);
    let mut q = q0.clone();
    let mut executed = vec![ee(&q)?];
    let mut cycle0_plan = Vec::new();
    let mut time_to_engage = None;
    for k in 0..max_cycles {
        let t = k as f64 * dt;
        let out = ctrl.step(&Observation::new(q.clone(), agent, t), t);
        if out.diagnostics.flag.is_some() {
            return Err(Error::Invalid(format!("cycle {k} flagged {:?}", out.diagnostics.flag)));
        }
        if k == 0 {
            cycle0_plan = ctrl.planned_ee_path();
        }
        if out.phase != Phase::Approaching {
            time_to_engage = Some(k);
            break;
        }
        q = out.command;
        executed.push(ee(&q)?);
    }
    let last = cycle0_plan.len().saturating_sub(1);
    let mean_deviation = executed
        .iter()
        .enumerate()
        .map(|(k, p)| (p - cycle0_plan[k.min(last)]).norm())
        .sum::<f64>()
        / executed.len() as f64;
    Ok(ConsistencyRun { cycle0_plan, executed, mean_deviation, time_to_engage, plan_steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: Policy,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Trials every compared policy succeeded on.
    pub mutual: usize,
    pub time_mean: f64,
    pub time_std: f64,
    pub length_error_mean: f64,
    pub length_error_std: f64,
    pub acceleration_mean: f64,
    pub acceleration_std: f64,
    pub jerk_mean: f64,
    pub jerk_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub seed: u64,
    pub n_trials: usize,
    pub policies: Vec<Policy>,
    pub trial_seeds: Vec<u64>,
    pub mutual_trials: Vec<usize>,
    pub summary: Vec<PolicySummary>,
    #[serde(skip)]
    pub results: Vec<TrialResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Trial indices on which every policy in `policies` succeeded.
pub fn mutual_successes(results: &[TrialResult], policies: &[Policy]) -> Vec<usize> {
    let mut trials: Vec<usize> = results.iter().map(|r| r.trial).collect();
    trials.sort_unstable();
    trials.dedup();
    trials
        .into_iter()
        .filter(|&t| {
            policies.iter().all(|&p| results.iter().any(|r| r.trial == t && r.policy == p && r.success))
        })
        .collect()
}

/// Success rates over all trials; metric statistics over mutual successes.
pub fn aggregate(results: &[TrialResult], policies: &[Policy]) -> (Vec<PolicySummary>, Vec<usize>) {
    let mutual = mutual_successes(results, policies);
    let summary = policies
        .iter()
        .map(|&p| {
            let mine: Vec<&TrialResult> = results.iter().filter(|r| r.policy == p).collect();
            let successes = mine.iter().filter(|r| r.success).count();
            let used: Vec<&TrialResult> =
                mine.iter().copied().filter(|r| mutual.binary_search(&r.trial).is_ok()).collect();
            assert!(used.iter().all(|r| r.success), "mutual set contains a failed trial");
            let col = |f: fn(&TrialResult) -> Option<f64>| -> (f64, f64) {
                mean_std(&used.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let (time_mean, time_std) = col(|r| r.handover_time_normalized);
            let (length_error_mean, length_error_std) = col(|r| r.trajectory_length_error);
            let (acceleration_mean, acceleration_std) = col(|r| r.mean_acceleration_cm);
            let (jerk_mean, jerk_std) = col(|r| r.mean_jerk_cm);
            PolicySummary {
                policy: p,
                trials: mine.len(),
                successes,
                success_rate: if mine.is_empty() { f64::NAN } else { successes as f64 / mine.len() as f64 },
                mutual: used.len(),
                time_mean,
                time_std,
                length_error_mean,
                length_error_std,
                acceleration_mean,
                acceleration_std,
                jerk_mean,
                jerk_std,
            }
        })
        .collect();
    (summary, mutual)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma_cm: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate_pct: f64,
}

pub struct Simulator {
    chain: Arc<SerialChain>,
    config: SimConfig,
    shoulder: Vector3<f64>,
    reach: f64,
}

impl Simulator {
    pub fn new(chain: Arc<SerialChain>, config: SimConfig) -> Result<Self> {
        chain.validate()?;
        config.validate()?;
        let mut scaled = (*chain).clone();
        scaled.velocity_limits.iter_mut().for_each(|v| *v *= config.robot_speed_scale);
        let chain = Arc::new(scaled);
        let shoulder = chain.base.transform_point(&chain.links[0].origin.translation);
        // Reachable shell from sampled forward kinematics.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reach: f64 = 0.0;
        for _ in 0..2000 {
            let q = DVector::from_iterator(
                chain.dof(),
                chain.joint_limits.iter().map(|l| rng.gen_range(l.min..=l.max)),
            );
            reach = reach.max((chain.forward_kinematics(&q)?.translation - shoulder).norm());
        }
        Ok(Self { chain, config, shoulder, reach })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn chain(&self) -> &Arc<SerialChain> {
        &self.chain
    }

    /// Inside the sampled reach shell with a 15% margin.
    pub fn reachable(&self, p: &Vector3<f64>) -> bool {
        (p - self.shoulder).norm() < 0.85 * self.reach
    }

    fn ee(&self, q: &DVector<f64>) -> Vector3<f64> {
        self.chain.forward_kinematics(q).map(|p| p.translation).unwrap_or_else(|_| Vector3::repeat(f64::NAN))
    }

    fn draw_obstacles(&self, rng: &mut ChaCha8Rng) -> Result<ObstacleWorld> {
        let s = &self.config.scenario;
        let k = s.obstacle_scale;
        let center = uniform_in(rng, &s.obstacle_center_min, &s.obstacle_center_max);
        let count = rng.gen_range(s.obstacle_count_min..=s.obstacle_count_max);
        if count == 0 {
            return Ok(ObstacleWorld::empty());
        }
        let mut prims = Vec::with_capacity(count);
        // A thin wall facing the robot, then overlapping parts around it.
        let wall = uniform_in(rng, &s.wall_half_min, &s.wall_half_max);
        prims.push(Primitive::Box { center, half_extents: wall * k });
        for _ in 1..count {
            let offset = Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15))
                * k;
            let c = center + offset;
            if rng.gen_bool(0.5) {
                let h = Vector3::new(rng.gen_range(0.03..0.08), rng.gen_range(0.03..0.10), rng.gen_range(0.03..0.10));
                prims.push(Primitive::Box { center: c, half_extents: h * k });
            } else {
                let dir = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let half = dir.normalize() * rng.gen_range(0.05..0.15) * k;
                prims.push(Primitive::Capsule { p0: c - half, p1: c + half, radius: rng.gen_range(0.025..0.05) * k });
            }
        }
        ObstacleWorld::new(prims)
    }

    /// One scenario draw; endpoints are resampled until they clear the
    /// obstacles and the goal lies in the reach shell.
    pub fn draw_scenario(&self, seed: u64) -> Result<ScenarioConfig> {
        let s = &self.config.scenario;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = self.draw_obstacles(&mut rng)?;
        let clear = |p: &Vector3<f64>| world.signed_distance(p) > s.agent_radius + 0.02;
        let mut pick = |lo: &Vector3<f64>, hi: &Vector3<f64>, reach: bool| -> Result<Vector3<f64>> {
            for _ in 0..200 {
                let p = uniform_in(&mut rng, lo, hi);
                if clear(&p) && (!reach || self.reachable(&p)) {
                    return Ok(p);
                }
            }
            Err(Error::InfeasibleScenario { penetration: f64::INFINITY })
        };
        let agent_start = pick(&s.agent_start_min, &s.agent_start_max, false)?;
        let agent_goal = pick(&s.agent_goal_min, &s.agent_goal_max, true)?;
        let mut robot_start = franka_ready();
        if robot_start.len() != self.chain.dof() {
            robot_start = self.chain.midrange();
        }
        for (j, q) in robot_start.iter_mut().enumerate() {
            let l = &self.chain.joint_limits[j];
            if s.robot_joint_jitter > 0.0 {
                *q += rng.gen_range(-s.robot_joint_jitter..=s.robot_joint_jitter);
            }
            *q = q.clamp(l.min, l.max);
        }
        Ok(ScenarioConfig {
            seed,
            world,
            agent_start,
            agent_goal,
            agent_radius: s.agent_radius,
            robot_start,
            workspace_min: s.workspace_min,
            workspace_max: s.workspace_max,
        })
    }

    /// Draws scenarios from `seed` until one has a feasible uncontrolled
    /// path.
    pub fn prepare_trial(&self, trial: usize, seed: u64) -> Result<PreparedTrial> {
        let mut last = None;
        for redraw in 0..self.config.max_redraws {
            let s = derive_seed(seed, redraw as u64);
            let scenario = match self.draw_scenario(s) {
                Ok(sc) => sc,
                Err(e @ Error::InfeasibleScenario { .. }) => {
                    last = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, u64::MAX));
            match generate_uncontrolled_trajectory(&scenario, &self.config.uncontrolled, self.config.mpc.dt, &mut rng)
            {
                Ok(uncontrolled) => return Ok(PreparedTrial { trial, seed, scenario, uncontrolled, redraws: redraw }),
                Err(e @ Error::InfeasibleScenario { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or(Error::InfeasibleScenario { penetration: f64::INFINITY }))
    }

    fn policy_config(&self, policy: Policy) -> MpcConfig {
        let mut cfg = self.config.mpc.clone();
        match policy {
            Policy::Ours => cfg.agent_model = AgentModel::Collaborative,
            Policy::RobotOnly => cfg.agent_model = AgentModel::Frozen,
            Policy::Attractor => {
                cfg.agent_model = AgentModel::Collaborative;
                cfg.horizon = self.config.attractor_horizon;
            }
        }
        cfg
    }

    /// Replays the agent path against `policy` with Gaussian observation
    /// noise of `sigma_cm` per axis. Success needs the ee within the
    /// handover threshold of the true agent within `2·T_uncontrolled` steps.
    pub fn run_trial(&self, prepared: &PreparedTrial, policy: Policy, sigma_cm: f64) -> Result<TrialRun> {
        if !(sigma_cm >= 0.0) || !sigma_cm.is_finite() {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {sigma_cm}")));
        }
        let sc = &prepared.scenario;
        let dt = self.config.mpc.dt;
        let t_unc = prepared.t_uncontrolled();
        let max_steps = 2 * t_unc;
        let mut ctrl = MpcController::new(
            self.chain.clone(),
            Arc::new(sc.world.clone()),
            self.config.weights.clone(),
            self.policy_config(policy),
        )?;
        let noise = Normal::new(0.0, sigma_cm / 100.0).map_err(|e| Error::Config(e.to_string()))?;
        // Same noise stream for every policy on a trial.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(prepared.seed, 1));

        let mut q = sc.robot_start.clone();
        let mut ee_path = vec![self.ee(&q)];
        let mut agent_path = vec![prepared.agent_at(0)];
        let mut t_success = (ee_path[0] - agent_path[0]).norm() < ENGAGE_THRESHOLD;
        let mut steps = 0;
        while !t_success && steps < max_steps {
            let actual = prepared.agent_at(steps);
            let observed = if sigma_cm > 0.0 {
                actual + Vector3::from_fn(|_, _| noise.sample(&mut rng))
            } else {
                actual
            };
            let now = steps as f64 * dt;
            let out = ctrl.step(&Observation::new(q.clone(), observed, now), now);
            q = out.command;
            steps += 1;
            ee_path.push(self.ee(&q));
            agent_path.push(prepared.agent_at(steps));
            t_success = (ee_path[steps] - agent_path[steps]).norm() < ENGAGE_THRESHOLD;
        }
        let final_distance_cm = 100.0 * (ee_path[steps] - agent_path[steps]).norm();
        let metrics = t_success.then(|| compute_metrics(&ee_path, dt, t_unc));
        let result = TrialResult {
            trial: prepared.trial,
            seed: prepared.seed,
            policy,
            sigma_cm,
            success: t_success,
            t_uncontrolled: t_unc,
            t_success: t_success.then_some(steps),
            handover_time_normalized: metrics.map(|m| m.handover_time_normalized),
            trajectory_length_error: metrics.map(|m| m.trajectory_length_error),
            mean_acceleration_cm: metrics.map(|m| m.mean_acceleration_cm),
            mean_jerk_cm: metrics.map(|m| m.mean_jerk_cm),
            final_distance_cm,
        };
        Ok(TrialRun { result, ee_path, agent_path })
    }

    fn prepare_all(&self, n: usize, seed: u64) -> Result<Vec<PreparedTrial>> {
        (0..n).into_par_iter().map(|i| self.prepare_trial(i, derive_seed(seed, i as u64))).collect()
    }

    /// Runs every policy on `n_trials` seeded scenarios, in parallel across
    /// trials.
    pub fn run_benchmark(&self, n_trials: usize, policies: &[Policy], seed: u64) -> Result<Benchmark> {
        if n_trials == 0 {
            return Err(Error::Config("benchmark needs at least one trial".into()));
        }
        if policies.is_empty() {
            return Err(Error::Config("benchmark needs at least one policy".into()));
        }
        let prepared = self.prepare_all(n_trials, seed)?;
        let per_trial: Vec<Vec<TrialResult>> = prepared
            .par_iter()
            .map(|p| policies.iter().map(|&pol| self.run_trial(p, pol, 0.0).map(|r| r.result)).collect())
            .collect::<Result<_>>()?;
        let results: Vec<TrialResult> = per_trial.into_iter().flatten().collect();
        let (summary, mutual_trials) = aggregate(&results, policies);
        Ok(Benchmark {
            seed,
            n_trials,
            policies: policies.to_vec(),
            trial_seeds: prepared.iter().map(|p| p.seed).collect(),
            mutual_trials,
            summary,
            results,
        })
    }

    /// Success rate of `ours` per noise level on one shared scenario set.
    pub fn run_noise_sweep(&self, sigmas_cm: &[f64], per: usize, seed: u64) -> Result<(Vec<NoiseRow>, Vec<TrialResult>)> {
        if per == 0 || sigmas_cm.is_empty() {
            return Err(Error::Config("noise sweep needs at least one sigma and one trial".into()));
        }
        if let Some(s) = sigmas_cm.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {s}")));
        }
        let prepared = self.prepare_all(per, seed)?;
        let jobs: Vec<(f64, &PreparedTrial)> =
            sigmas_cm.iter().flat_map(|&s| prepared.iter().map(move |p| (s, p))).collect();
        let results: Vec<TrialResult> = jobs
            .par_iter()
            .map(|(s, p)| self.run_trial(p, Policy::Ours, *s).map(|r| r.result))
            .collect::<Result<_>>()?;
        let rows = sigmas_cm
            .iter()
            .map(|&s| {
                let mine: Vec<&TrialResult> = results.iter().filter(|r| r.sigma_cm == s).collect();
                let successes = mine.iter().filter(|r| r.success).count();
                NoiseRow {
                    sigma_cm: s,
                    trials: mine.len(),
                    successes,
                    success_rate_pct: 100.0 * successes as f64 / mine.len() as f64,
                }
            })
            .collect();
        Ok((rows, results))
    }
}
