//! Receding-horizon loop: observe, re-anchor, warm-start, solve within
//! budget, emit the next joint command, and track handover phase.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::collab::{CollaborativeProblem, ReAnchorTargets, RobotAgent, SphereAgent, DEFAULT_AGENT_RADIUS};
use crate::costs::Weights;
use crate::error::{Error, Result};
use crate::geometry::{desired_grasp_rotation, world_up, ObstacleWorld, Rotation};
use crate::kinematics::SerialChain;
use crate::solver::{ConvergenceReason, SolverOptions};
use crate::trajectory::{Trajectory, DEFAULT_DT, DEFAULT_HORIZON};

/// Engage distance, meters.
pub const ENGAGE_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub robot_q: DVector<f64>,
    pub agent_pos: Vector3<f64>,
    /// Seconds on the controller's clock.
    pub stamp: f64,
    pub valid: bool,
}

impl Observation {
    pub fn new(robot_q: DVector<f64>, agent_pos: Vector3<f64>, stamp: f64) -> Self {
        Self { robot_q, agent_pos, stamp, valid: true }
    }

    fn is_finite(&self) -> bool {
        self.robot_q.iter().chain(self.agent_pos.iter()).all(|x| x.is_finite()) && self.stamp.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approaching,
    Engaged,
    Done,
}

/// How the external agent is treated while planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentModel {
    /// Jointly optimized with the robot.
    Collaborative,
    /// Held at its observed position each cycle.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub engage_threshold: f64,
    /// Engaged reverts to approaching beyond `release_factor · threshold`.
    pub release_factor: f64,
    /// Consecutive engaged cycles before the handover is done.
    pub done_after: usize,
    pub stale_after: f64,
    pub agent_radius: f64,
    pub agent_model: AgentModel,
    /// Condition the agent prediction on the previous observation, so it
    /// continues the observed velocity.
    pub agent_history: bool,
    pub solver: SolverOptions,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            dt: DEFAULT_DT,
            engage_threshold: ENGAGE_THRESHOLD,
            release_factor: 2.0,
            done_after: 5,
            stale_after: 0.5,
            agent_radius: DEFAULT_AGENT_RADIUS,
            agent_model: AgentModel::Collaborative,
            agent_history: true,
            solver: SolverOptions::mpc(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("mpc.horizon must be at least 1".into()));
        }
        for (name, v) in [
            ("mpc.dt", self.dt),
            ("mpc.engage_threshold", self.engage_threshold),
            ("mpc.stale_after", self.stale_after),
            ("mpc.agent_radius", self.agent_radius),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.release_factor >= 1.0) {
            return Err(Error::Config("mpc.release_factor must be at least 1".into()));
        }
        if self.solver.max_iters == 0 {
            return Err(Error::Config("solver.max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Strict `‖ee − agent‖ < threshold`.
pub fn detect_engage(ee: &Vector3<f64>, agent: &Vector3<f64>, threshold: f64) -> bool {
    (ee - agent).norm() < threshold
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MpcState {
    pub robot_plan: Option<Trajectory>,
    pub agent_plan: Option<Trajectory>,
    pub desired_rotation: Option<Rotation>,
    pub targets: Option<ReAnchorTargets>,
    pub phase: Option<Phase>,
    pub cycles: usize,
    pub engaged_cycles: usize,
    pub stale_count: usize,
    pub last_command: Option<DVector<f64>>,
    /// Last planned-on agent observation and its stamp.
    pub last_agent: Option<(Vector3<f64>, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepFlag {
    StaleObservation,
    InvalidObservation,
    SolverFailure,
}

/// Per-cycle diagnostics, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cycle: usize,
    pub phase: Phase,
    pub distance: f64,
    pub cost: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub reason: Option<ConvergenceReason>,
    pub flag: Option<StepFlag>,
    /// Solve wall time; excluded from reproducibility comparisons.
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub command: DVector<f64>,
    pub phase: Phase,
    pub diagnostics: Diagnostics,
}

pub struct MpcController {
    chain: Arc<SerialChain>,
    world: Arc<ObstacleWorld>,
    weights: Weights,
    config: MpcConfig,
    state: MpcState,
}

impl MpcController {
    pub fn new(chain: Arc<SerialChain>, world: Arc<ObstacleWorld>, weights: Weights, config: MpcConfig) -> Result<Self> {
        chain.validate()?;
        world.validate()?;
        weights.validate()?;
        config.validate()?;
        Ok(Self { chain, world, weights, config, state: MpcState::default() })
    }

    pub fn state(&self) -> &MpcState {
        &self.state
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn chain(&self) -> &Arc<SerialChain> {
        &self.chain
    }

    pub fn world(&self) -> &Arc<ObstacleWorld> {
        &self.world
    }

    pub fn phase(&self) -> Phase {
        self.state.phase.unwrap_or(Phase::Approaching)
    }

    /// Replaces the weights; plans are kept as warm starts.
    pub fn set_weights(&mut self, weights: Weights) -> Result<()> {
        weights.validate()?;
        self.weights = weights;
        Ok(())
    }

    pub fn set_world(&mut self, world: Arc<ObstacleWorld>) -> Result<()> {
        world.validate()?;
        self.world = world;
        self.reset();
        Ok(())
    }

    pub fn reset(&mut self) {
        self.state = MpcState::default();
    }

    /// Planned end-effector path of the latest solve.
    pub fn planned_ee_path(&self) -> Vec<Vector3<f64>> {
        self.state
            .robot_plan
            .as_ref()
            .map(|t| {
                t.knots()
                    .iter()
                    .filter_map(|q| self.chain.forward_kinematics(q).ok().map(|p| p.translation))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Predicted agent path of the latest solve.
    pub fn predicted_agent_path(&self) -> Vec<Vector3<f64>> {
        self.state
            .agent_plan
            .as_ref()
            .map(|t| t.knots().iter().map(|k| Vector3::new(k[0], k[1], k[2])).collect())
            .unwrap_or_default()
    }

    fn hold(&mut self, obs: &Observation, flag: StepFlag) -> StepOutput {
        self.state.stale_count += 1;
        let command = match (&self.state.last_command, obs.valid && obs.is_finite()) {
            (_, true) if obs.robot_q.len() == self.chain.dof() => obs.robot_q.clone(),
            (Some(c), _) => c.clone(),
            _ => self.chain.midrange(),
        };
        let phase = self.phase();
        StepOutput {
            command,
            phase,
            diagnostics: Diagnostics {
                cycle: self.state.cycles,
                phase,
                distance: f64::NAN,
                cost: f64::NAN,
                iterations: 0,
                outer_iterations: 0,
                reason: None,
                flag: Some(flag),
                solve_ms: 0.0,
            },
        }
    }

    fn update_phase(&mut self, distance: f64) -> Phase {
        let th = self.config.engage_threshold;
        let next = match self.phase() {
            Phase::Done => Phase::Done,
            Phase::Approaching if distance < th => Phase::Engaged,
            Phase::Approaching => Phase::Approaching,
            Phase::Engaged if distance > self.config.release_factor * th => Phase::Approaching,
            Phase::Engaged => Phase::Engaged,
        };
        self.state.engaged_cycles = if next == Phase::Engaged { self.state.engaged_cycles + 1 } else { 0 };
        let next = if next == Phase::Engaged && self.state.engaged_cycles > self.config.done_after {
            Phase::Done
        } else {
            next
        };
        self.state.phase = Some(next);
        next
    }

    /// One control cycle at controller time `now` (seconds).
    pub fn step(&mut self, obs: &Observation, now: f64) -> StepOutput {
        if !obs.valid || !obs.is_finite() || obs.robot_q.len() != self.chain.dof() {
            return self.hold(obs, StepFlag::InvalidObservation);
        }
        if now - obs.stamp > self.config.stale_after {
            return self.hold(obs, StepFlag::StaleObservation);
        }
        match self.plan(obs) {
            Ok(out) => out,
            Err(e) => {
                log::warn!("mpc solve failed: {e}");
                self.hold(obs, StepFlag::SolverFailure)
            }
        }
    }

    fn plan(&mut self, obs: &Observation) -> Result<StepOutput> {
        let (horizon, dt) = (self.config.horizon, self.config.dt);
        let q0 = obs.robot_q.clone();
        let p0 = DVector::from_column_slice(obs.agent_pos.as_slice());
        let ee0 = self.chain.forward_kinematics(&q0)?;
        let distance = (ee0.translation - obs.agent_pos).norm();
        let phase = self.update_phase(distance);

        let rotation = desired_grasp_rotation(&ee0.translation, &obs.agent_pos, &world_up())
            .ok()
            .or(self.state.desired_rotation)
            .unwrap_or(ee0.rotation);
        let targets = ReAnchorTargets { robot_target: obs.agent_pos, agent_target: ee0.translation };

        let robot_init = match &self.state.robot_plan {
            Some(prev) if prev.horizon() == horizon => prev.time_shift_warm_start(&q0)?,
            _ => Trajectory::constant(&q0, horizon, dt)?,
        };
        let frozen = self.config.agent_model == AgentModel::Frozen;
        let agent_init = match &self.state.agent_plan {
            Some(prev) if !frozen && prev.horizon() == horizon => prev.time_shift_warm_start(&p0)?,
            _ => Trajectory::constant(&p0, horizon, dt)?,
        };
        let mut agent = SphereAgent::new(agent_init);
        agent.anchor = p0;
        if self.config.agent_history && !frozen {
            // Only a sample about one cycle old gives a usable velocity.
            agent.previous = self
                .state
                .last_agent
                .filter(|(_, s)| ((obs.stamp - s) / dt - 1.0).abs() < 0.5)
                .map(|(p, _)| DVector::from_column_slice(p.as_slice()));
        }
        agent.radius = self.config.agent_radius;
        let mut robot = RobotAgent::new(self.chain.clone(), robot_init);
        robot.anchor = q0.clone();

        let mut problem = CollaborativeProblem::new(Some(robot), vec![agent], self.world.clone(), self.weights.clone());
        problem.desired_rotation = Some(rotation);
        problem.targets = Some(targets);
        problem.freeze_agents = frozen;

        let start = Instant::now();
        let sol = problem.solve(&self.config.solver)?;
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let plan = sol.robot.clone().expect("robot present");

        let mut command = plan.knot(1).clone();
        for (j, c) in command.iter_mut().enumerate() {
            let step = self.chain.velocity_limits[j] * dt;
            *c = c.clamp(q0[j] - step, q0[j] + step);
        }

        self.state.robot_plan = Some(plan);
        self.state.agent_plan = sol.agents.first().cloned();
        self.state.desired_rotation = Some(rotation);
        self.state.targets = Some(targets);
        self.state.last_command = Some(command.clone());
        self.state.last_agent = Some((obs.agent_pos, obs.stamp));
        self.state.cycles += 1;

        Ok(StepOutput {
            command,
            phase,
            diagnostics: Diagnostics {
                cycle: self.state.cycles - 1,
                phase,
                distance,
                cost: sol.cost,
                iterations: sol.report.iterations,
                outer_iterations: sol.report.outer_iterations,
                reason: Some(sol.report.reason),
                flag: None,
                solve_ms,
            },
        })
    }
}

/// Single-slot, latest-wins handoff between one writer and one reader.
#[derive(Debug, Default)]
pub struct Mailbox<T> {
    slot: Mutex<Option<T>>,
}

impl<T: Clone> Mailbox<T> {
    pub fn new() -> Self {
        Self { slot: Mutex::new(None) }
    }

    /// Overwrites whatever is pending.
    pub fn post(&self, v: T) {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner()) = Some(v);
    }

    /// Newest value, left in place.
    pub fn latest(&self) -> Option<T> {
        self.slot.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Newest value, emptying the slot.
    pub fn take(&self) -> Option<T> {
        self.slot.lock().unwrap_or_else(|e| e.into_inner()).take()
    }
}
