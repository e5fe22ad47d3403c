//! The collaborative interaction model: one robot and one or more sphere
//! agents optimized jointly under `λ_R c^R + λ_A c^A + λ_I c^I`.
//!
//! Participants are indexed robot first (when present), then agents in order.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::costs::{
    welsch_weight, AccelerationFactor, AnchorFactor, Endpoint, JointLimitFactor, JointVelocityFactor,
    OrientationFactor, PointDifferenceFactor, ResidualKind, RobotObstacleFactor, SphereObstacleFactor,
    VelocityFactor, Weights,
};
use crate::error::{Error, Result};
use crate::geometry::{ObstacleWorld, Rotation};
use crate::kinematics::SerialChain;
use crate::solver::{solve_irls, Kernel, NlsProblem, SolveReport, SolverOptions, Values, VariableLayout};
use crate::trajectory::Trajectory;

/// Default hand radius, meters.
pub const DEFAULT_AGENT_RADIUS: f64 = 0.10;

#[derive(Debug, Clone)]
pub struct RobotAgent {
    pub chain: Arc<SerialChain>,
    /// Joint-space trajectory; knot 0 is held near `anchor`.
    pub trajectory: Trajectory,
    /// Observed configuration this cycle.
    pub anchor: DVector<f64>,
}

impl RobotAgent {
    /// Anchored at the trajectory's first knot.
    pub fn new(chain: Arc<SerialChain>, trajectory: Trajectory) -> Self {
        let anchor = trajectory.knot(0).clone();
        Self { chain, trajectory, anchor }
    }
}

#[derive(Debug, Clone)]
pub struct SphereAgent {
    /// 3-D hand positions in meters; knot 0 is held near `anchor`.
    pub trajectory: Trajectory,
    pub anchor: DVector<f64>,
    /// Position one step before knot 0, when known. Adds the smoothness
    /// cliques centred on knot 0 so replans carry the current velocity.
    pub previous: Option<DVector<f64>>,
    pub radius: f64,
    pub goal: Option<Vector3<f64>>,
}

impl SphereAgent {
    /// Anchored at the trajectory's first knot, default radius, no goal.
    pub fn new(trajectory: Trajectory) -> Self {
        let anchor = trajectory.knot(0).clone();
        Self { trajectory, anchor, previous: None, radius: DEFAULT_AGENT_RADIUS, goal: None }
    }

    pub fn stationary(p: Vector3<f64>, horizon: usize, dt: f64) -> Result<Self> {
        Ok(Self::new(Trajectory::constant(&DVector::from_column_slice(p.as_slice()), horizon, dt)?))
    }
}

/// Each party is rewarded for reaching the other's observed start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReAnchorTargets {
    /// Target for the robot end effector: the agent's observed start.
    pub robot_target: Vector3<f64>,
    /// Target for the agent: the robot end effector's observed start.
    pub agent_target: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct CollaborativeProblem {
    pub robot: Option<RobotAgent>,
    pub agents: Vec<SphereAgent>,
    pub world: Arc<ObstacleWorld>,
    pub weights: Weights,
    /// Per-cycle desired end-effector rotation; orientation terms are
    /// omitted when `None`.
    pub desired_rotation: Option<Rotation>,
    pub targets: Option<ReAnchorTargets>,
    /// Hold every agent at its initial trajectory (robot-only planning).
    pub freeze_agents: bool,
}

/// Block indices of every participant's knots inside an [`NlsProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMap {
    pub robot: Option<Vec<usize>>,
    pub agents: Vec<Vec<usize>>,
}

impl BlockMap {
    pub fn participant(&self, i: usize) -> &[usize] {
        match (&self.robot, i) {
            (Some(r), 0) => r,
            (Some(_), i) => &self.agents[i - 1],
            (None, i) => &self.agents[i],
        }
    }
}

#[derive(Debug)]
pub struct Assembled {
    pub nls: NlsProblem,
    pub values: Values,
    pub blocks: BlockMap,
}

#[derive(Debug, Clone)]
pub struct CollabSolution {
    pub robot: Option<Trajectory>,
    pub agents: Vec<Trajectory>,
    /// True collaborative cost at the solution.
    pub cost: f64,
    pub report: SolveReport,
}

impl CollabSolution {
    pub fn participant(&self, i: usize) -> &Trajectory {
        match (&self.robot, i) {
            (Some(r), 0) => r,
            (Some(_), i) => &self.agents[i - 1],
            (None, i) => &self.agents[i],
        }
    }
}

impl CollaborativeProblem {
    pub fn new(robot: Option<RobotAgent>, agents: Vec<SphereAgent>, world: Arc<ObstacleWorld>, weights: Weights) -> Self {
        Self { robot, agents, world, weights, desired_rotation: None, targets: None, freeze_agents: false }
    }

    pub fn participants(&self) -> usize {
        self.agents.len() + usize::from(self.robot.is_some())
    }

    pub fn trajectory(&self, i: usize) -> &Trajectory {
        match (&self.robot, i) {
            (Some(r), 0) => &r.trajectory,
            (Some(_), i) => &self.agents[i - 1].trajectory,
            (None, i) => &self.agents[i].trajectory,
        }
    }

    pub fn set_trajectory(&mut self, i: usize, t: Trajectory) {
        match (&mut self.robot, i) {
            (Some(r), 0) => r.trajectory = t,
            (Some(_), i) => self.agents[i - 1].trajectory = t,
            (None, i) => self.agents[i].trajectory = t,
        }
    }

    pub fn horizon(&self) -> usize {
        self.trajectory(0).horizon()
    }

    pub fn dt(&self) -> f64 {
        self.trajectory(0).dt()
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.participants() == 0 {
            return Err(Error::Config("problem has no participants".into()));
        }
        let (len, dt) = (self.trajectory(0).len(), self.dt());
        for i in 0..self.participants() {
            let t = self.trajectory(i);
            if t.len() != len || t.dt() != dt {
                return Err(Error::Config("all trajectories must share horizon and dt".into()));
            }
        }
        if len < 3 {
            return Err(Error::TooShort { horizon: len.saturating_sub(2) });
        }
        if let Some(r) = &self.robot {
            r.chain.validate()?;
            for d in [r.trajectory.dim(), r.anchor.len()] {
                if d != r.chain.dof() {
                    return Err(Error::DimensionMismatch { expected: r.chain.dof(), got: d });
                }
            }
        }
        for a in &self.agents {
            let prev = a.previous.as_ref().map_or(3, |p| p.len());
            for d in [a.trajectory.dim(), a.anchor.len(), prev] {
                if d != 3 {
                    return Err(Error::DimensionMismatch { expected: 3, got: d });
                }
            }
            if !(a.radius > 0.0) {
                return Err(Error::Config(format!("agent radius must be positive, got {}", a.radius)));
            }
        }
        self.world.validate()
    }

    fn agents_free(&self) -> bool {
        !self.freeze_agents && self.weights.interaction.lambda_agent > 0.0
    }

    /// Builds the stacked least-squares problem. `fixed[i]` holds participant
    /// `i` at its current trajectory.
    pub fn assemble_with(&self, fixed: &[bool]) -> Result<Assembled> {
        self.validate()?;
        let np = self.participants();
        if fixed.len() != np {
            return Err(Error::DimensionMismatch { expected: np, got: fixed.len() });
        }
        let knots = self.trajectory(0).len();
        let horizon = knots - 2;
        let dt = self.dt();
        let w = &self.weights;
        let (wr, wa, wi) = (&w.robot, &w.agent, &w.interaction);

        let mut layout = VariableLayout::default();
        let mut values = Values::new();
        let mut participant_blocks: Vec<Vec<usize>> = Vec::with_capacity(np);
        for i in 0..np {
            let traj = self.trajectory(i);
            let is_robot = self.robot.is_some() && i == 0;
            let frozen = fixed[i] || (!is_robot && !self.agents_free());
            let mut ids = Vec::with_capacity(knots);
            for (t, k) in traj.knots().iter().enumerate() {
                let id = layout.push(k.len(), (t, i));
                layout.blocks[id].fixed = frozen;
                values.push(k.clone());
                ids.push(id);
            }
            participant_blocks.push(ids);
        }
        // Fixed history blocks go last so participant block ids stay dense.
        let mut history: Vec<Option<usize>> = Vec::with_capacity(self.agents.len());
        for (a, ag) in self.agents.iter().enumerate() {
            history.push(ag.previous.as_ref().map(|prev| {
                let id = layout.push(prev.len(), (0, np + a));
                layout.blocks[id].fixed = true;
                values.push(prev.clone());
                id
            }));
        }
        let (robot_ids, agent_ids): (Option<Vec<usize>>, Vec<Vec<usize>>) = if self.robot.is_some() {
            let mut it = participant_blocks.into_iter();
            (it.next(), it.collect())
        } else {
            (None, participant_blocks)
        };

        let mut nls = NlsProblem::new(layout);
        macro_rules! add {
            ($weight:expr, $f:expr) => {
                if $weight > 0.0 {
                    nls.add($f);
                }
            };
        }

        let lr = wi.lambda_robot;
        let la = wi.lambda_agent;
        let li = wi.lambda_interaction;
        let reward_w = li * wi.lambda_reward;
        let welsch = Kernel::Welsch { sigma: wi.reward_sigma };

        // Interacting pair: robot and first agent, or the first two agents.
        let ee_point = |t: usize| -> Option<(Endpoint, Vector3<f64>)> {
            let r = self.robot.as_ref()?;
            let ids = robot_ids.as_ref()?;
            let p = r.chain.forward_kinematics(r.trajectory.knot(t)).ok()?.translation;
            Some((Endpoint::RobotEe { key: ids[t], chain: r.chain.clone() }, p))
        };
        let agent_point = |a: usize, t: usize| -> Option<(Endpoint, Vector3<f64>)> {
            let ag = self.agents.get(a)?;
            let k = ag.trajectory.knot(t);
            Some((Endpoint::Point { key: agent_ids[a][t] }, Vector3::new(k[0], k[1], k[2])))
        };
        let pair = |t: usize| -> Option<((Endpoint, Vector3<f64>), (Endpoint, Vector3<f64>))> {
            if self.robot.is_some() {
                Some((ee_point(t)?, agent_point(0, t)?))
            } else {
                Some((agent_point(0, t)?, agent_point(1, t)?))
            }
        };
        // Second interacting participant's blocks, for braking terms.
        let partner_blocks: Option<&Vec<usize>> =
            if self.robot.is_some() { agent_ids.first() } else { agent_ids.get(1) };
        let first_blocks: Option<&Vec<usize>> =
            if self.robot.is_some() { robot_ids.as_ref() } else { agent_ids.first() };

        for t in 0..knots {
            let interior = (1..=horizon).contains(&t);
            let clique = interior.then(|| [t - 1, t, t + 1]);

            if let (Some(r), Some(ids)) = (&self.robot, &robot_ids) {
                let k = ids[t];
                if t == 0 {
                    add!(wi.anchor, AnchorFactor::new(k, r.anchor.clone(), wi.anchor));
                } else {
                    let wj = lr * wr.joint_limit;
                    add!(wj, JointLimitFactor::new(k, r.chain.joint_limits.clone(), wr.joint_epsilon, wj));
                    let wo = lr * wr.obstacle;
                    add!(wo, RobotObstacleFactor::new(k, r.chain.clone(), self.world.clone(), wo));
                    if let (true, Some(rot)) = (interior, self.desired_rotation) {
                        let wq = lr * wr.orientation;
                        add!(wq, OrientationFactor::new(k, r.chain.clone(), rot, wq));
                    }
                }
                if let Some(c) = clique {
                    let keys = c.map(|j| ids[j]);
                    add!(lr * wr.velocity, VelocityFactor::new(keys, dt, lr * wr.velocity));
                    add!(lr * wr.acceleration, AccelerationFactor::new(keys, dt, lr * wr.acceleration));
                    let wj = lr * wr.joint_limit;
                    add!(
                        wj,
                        JointVelocityFactor::new(keys, r.chain.velocity_limits.clone(), wr.joint_epsilon, dt, wj)
                    );
                }
            }

            for (a, ag) in self.agents.iter().enumerate() {
                let ids = &agent_ids[a];
                let k = ids[t];
                let p = ag.trajectory.knot(t);
                let p = Vector3::new(p[0], p[1], p[2]);
                let keys = match (t, history[a]) {
                    (0, Some(h)) => Some([h, ids[0], ids[1]]),
                    _ => clique.map(|c| c.map(|j| ids[j])),
                };
                if let Some(keys) = keys {
                    add!(la * wa.velocity, VelocityFactor::new(keys, dt, la * wa.velocity));
                    add!(la * wa.acceleration, AccelerationFactor::new(keys, dt, la * wa.acceleration));
                    if let Some(goal) = ag.goal {
                        let gate = welsch_weight((p - goal).norm(), wa.goal_sigma);
                        let ws = la * wa.stop_velocity * gate;
                        add!(ws, VelocityFactor::stopping(keys, dt, ws));
                    }
                }
                if t == 0 {
                    add!(wi.anchor, AnchorFactor::new(k, ag.anchor.clone(), wi.anchor));
                    continue;
                }
                let wo = la * wa.obstacle;
                add!(wo, SphereObstacleFactor::new(k, self.world.clone(), ag.radius + wa.clearance, wo));
                if let Some(goal) = ag.goal {
                    let wg = la * wa.goal;
                    add!(
                        wg,
                        PointDifferenceFactor::new(
                            Endpoint::Point { key: k },
                            Endpoint::Fixed(goal),
                            wg,
                            Kernel::Squared,
                            ResidualKind::GoalAttraction,
                        )
                    );
                    let wgr = la * wa.goal_reward;
                    add!(
                        wgr,
                        PointDifferenceFactor::new(
                            Endpoint::Point { key: k },
                            Endpoint::Fixed(goal),
                            wgr,
                            Kernel::Welsch { sigma: wa.goal_sigma },
                            ResidualKind::SparseReward,
                        )
                    );
                }
            }

            if li > 0.0 && t >= 1 {
                if let Some(((ea, pa), (eb, pb))) = pair(t) {
                    if t == knots - 1 {
                        nls.add(PointDifferenceFactor::new(
                            ea.clone(),
                            eb.clone(),
                            li,
                            Kernel::Squared,
                            ResidualKind::InteractionTerminal,
                        ));
                    }
                    add!(
                        reward_w,
                        PointDifferenceFactor::new(ea.clone(), eb.clone(), reward_w, welsch, ResidualKind::SparseReward)
                    );
                    if let Some(tg) = &self.targets {
                        add!(
                            reward_w,
                            PointDifferenceFactor::new(
                                ea,
                                Endpoint::Fixed(tg.robot_target),
                                reward_w,
                                welsch,
                                ResidualKind::SparseReward,
                            )
                        );
                        add!(
                            reward_w,
                            PointDifferenceFactor::new(
                                eb,
                                Endpoint::Fixed(tg.agent_target),
                                reward_w,
                                welsch,
                                ResidualKind::SparseReward,
                            )
                        );
                    }
                    if let (Some(c), true) = (clique, wi.lambda_reward > 0.0) {
                        let gate = welsch_weight((pa - pb).norm(), wi.reward_sigma);
                        let ws = li * wi.stop_velocity * gate;
                        for ids in [first_blocks, partner_blocks].into_iter().flatten() {
                            add!(ws, VelocityFactor::stopping(c.map(|j| ids[j]), dt, ws));
                        }
                    }
                }
            }
        }

        Ok(Assembled { nls, values, blocks: BlockMap { robot: robot_ids, agents: agent_ids } })
    }

    pub fn assemble(&self) -> Result<Assembled> {
        self.assemble_with(&vec![false; self.participants()])
    }

    fn extract(&self, asm: &Assembled, values: &Values) -> Result<(Option<Trajectory>, Vec<Trajectory>)> {
        let dt = self.dt();
        let take = |ids: &[usize]| Trajectory::new(ids.iter().map(|&b| values[b].clone()).collect(), dt);
        let robot = asm.blocks.robot.as_deref().map(take).transpose()?;
        let agents = asm.blocks.agents.iter().map(|ids| take(ids)).collect::<Result<Vec<_>>>()?;
        Ok((robot, agents))
    }

    /// Jointly optimizes every free participant.
    pub fn solve(&self, opts: &SolverOptions) -> Result<CollabSolution> {
        self.solve_with_fixed(&vec![false; self.participants()], opts)
    }

    pub fn solve_with_fixed(&self, fixed: &[bool], opts: &SolverOptions) -> Result<CollabSolution> {
        let mut asm = self.assemble_with(fixed)?;
        let mut values = std::mem::take(&mut asm.values);
        let report = solve_irls(&asm.nls, &mut values, opts)?;
        let (robot, agents) = self.extract(&asm, &values)?;
        Ok(CollabSolution { robot, agents, cost: report.final_cost, report })
    }

    /// True collaborative cost of the problem's current trajectories.
    pub fn cost(&self) -> Result<f64> {
        let asm = self.assemble()?;
        Ok(asm.nls.true_cost(&asm.values))
    }

    /// Cost summed by residual kind, for diagnostics.
    pub fn cost_breakdown(&self) -> Result<BTreeMap<&'static str, f64>> {
        let asm = self.assemble()?;
        let mut out = BTreeMap::new();
        for (f, c) in asm.nls.factors.iter().zip(asm.nls.factor_costs(&asm.values)) {
            *out.entry(f.label()).or_insert(0.0) += c;
        }
        Ok(out)
    }

    /// Cost of participant `i` following `xi` after every other participant
    /// responds optimally.
    pub fn predictive_collaborative_cost(
        &self,
        i: usize,
        xi: &Trajectory,
        opts: &SolverOptions,
    ) -> Result<(f64, CollabSolution)> {
        let mut p = self.clone();
        p.set_trajectory(i, xi.clone());
        let mut fixed = vec![false; self.participants()];
        fixed[i] = true;
        let sol = p.solve_with_fixed(&fixed, opts)?;
        Ok((sol.cost, sol))
    }

    /// Fixes each participant at its part of `joint` in turn, re-solves the
    /// others from this problem's initial trajectories, and measures how far
    /// the conditional responses land from `joint`.
    pub fn equilibrium_consistency_check(
        &self,
        joint: &CollabSolution,
        tol: f64,
        opts: &SolverOptions,
    ) -> Result<ConsistencyReport> {
        let np = self.participants();
        let mut deviations = Vec::with_capacity(np);
        let mut cost_gaps = Vec::with_capacity(np);
        for i in 0..np {
            let (cost, sol) = self.predictive_collaborative_cost(i, joint.participant(i), opts)?;
            let mut dev: f64 = 0.0;
            for j in (0..np).filter(|&j| j != i) {
                for (a, b) in sol.participant(j).knots().iter().zip(joint.participant(j).knots()) {
                    dev = dev.max((a - b).amax());
                }
            }
            deviations.push(dev);
            cost_gaps.push((cost - joint.cost).abs());
        }
        let consistent = deviations.iter().all(|d| *d < tol);
        Ok(ConsistencyReport { deviations, cost_gaps, consistent })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Per participant: max knot deviation of the others' conditional response.
    pub deviations: Vec<f64>,
    /// Per participant: |predictive cost − joint cost|.
    pub cost_gaps: Vec<f64>,
    /// False flags a non-unique equilibrium at this tolerance.
    pub consistent: bool,
}
