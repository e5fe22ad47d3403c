//! Residual catalog. Every cost is a residual block `r` with weight `λ`,
//! contributing `λ‖r‖²`, or `λ(1 − exp(−‖r‖²/2σ²))` for Welsch terms.

mod factors;

pub use factors::{
    AccelerationFactor, AnchorFactor, Endpoint, JointLimitFactor, JointVelocityFactor, OrientationFactor,
    PointDifferenceFactor, RobotObstacleFactor, SphereObstacleFactor, VelocityFactor,
};
pub use crate::solver::welsch_weight;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{log_so3, ObstacleWorld, Rotation};
use crate::kinematics::JointLimit;
use crate::trajectory::Clique;

/// Residual kinds, used to label factors in diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    JointLimit,
    JointVelLimit,
    Obstacle,
    Velocity,
    Acceleration,
    Orientation,
    Anchor,
    InteractionTerminal,
    SparseReward,
    GoalAttraction,
    StopVelocity,
}

/// Robot-side weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotWeights {
    pub obstacle: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub joint_limit: f64,
    pub orientation: f64,
    /// Joint-limit tolerance ε in radians (and rad/s for velocity limits).
    pub joint_epsilon: f64,
}

impl Default for RobotWeights {
    fn default() -> Self {
        Self { obstacle: 50.0, velocity: 1.0, acceleration: 0.5, joint_limit: 100.0, orientation: 5.0, joint_epsilon: 0.05 }
    }
}

/// Sphere-agent weights; these eight numbers are what calibration tunes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentWeights {
    pub obstacle: f64,
    pub velocity: f64,
    pub acceleration: f64,
    /// Quadratic pull toward a known goal.
    pub goal: f64,
    /// Welsch reward toward a known goal at every step.
    pub goal_reward: f64,
    pub goal_sigma: f64,
    /// Braking near the goal, gated by proximity.
    pub stop_velocity: f64,
    /// Extra obstacle margin added to the hand radius, meters.
    pub clearance: f64,
}

impl Default for AgentWeights {
    fn default() -> Self {
        Self {
            obstacle: 50.0,
            velocity: 1.0,
            acceleration: 0.5,
            goal: 1.0,
            goal_reward: 2.0,
            goal_sigma: 0.2,
            stop_velocity: 1.0,
            clearance: 0.0,
        }
    }
}

/// Coupling weights: `C = λ_R c^R + λ_A c^A + λ_I (c_terminal + λ_reward Σ r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionWeights {
    pub lambda_robot: f64,
    pub lambda_agent: f64,
    pub lambda_interaction: f64,
    pub lambda_reward: f64,
    pub reward_sigma: f64,
    /// Proximity-gated velocity penalty accompanying the reward.
    pub stop_velocity: f64,
    /// Prior weight holding knot 0 at the observation.
    pub anchor: f64,
}

impl Default for InteractionWeights {
    fn default() -> Self {
        Self {
            lambda_robot: 1.0,
            lambda_agent: 1.0,
            lambda_interaction: 10.0,
            lambda_reward: 2.0,
            reward_sigma: 0.2,
            stop_velocity: 1.0,
            anchor: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    pub robot: RobotWeights,
    pub agent: AgentWeights,
    pub interaction: InteractionWeights,
}

impl Weights {
    pub fn validate(&self) -> Result<()> {
        let r = &self.robot;
        let a = &self.agent;
        let i = &self.interaction;
        let named = [
            ("robot.obstacle", r.obstacle),
            ("robot.velocity", r.velocity),
            ("robot.acceleration", r.acceleration),
            ("robot.joint_limit", r.joint_limit),
            ("robot.orientation", r.orientation),
            ("robot.joint_epsilon", r.joint_epsilon),
            ("agent.obstacle", a.obstacle),
            ("agent.velocity", a.velocity),
            ("agent.acceleration", a.acceleration),
            ("agent.goal", a.goal),
            ("agent.goal_reward", a.goal_reward),
            ("agent.stop_velocity", a.stop_velocity),
            ("agent.clearance", a.clearance),
            ("interaction.lambda_robot", i.lambda_robot),
            ("interaction.lambda_agent", i.lambda_agent),
            ("interaction.lambda_interaction", i.lambda_interaction),
            ("interaction.lambda_reward", i.lambda_reward),
            ("interaction.stop_velocity", i.stop_velocity),
            ("interaction.anchor", i.anchor),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [("agent.goal_sigma", a.goal_sigma), ("interaction.reward_sigma", i.reward_sigma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// The whole objective multiplied by `c` via the top-level λ's and the
    /// anchor prior (tolerances and σ unchanged).
    pub fn scaled(&self, c: f64) -> Self {
        let mut w = self.clone();
        let i = &mut w.interaction;
        for x in [&mut i.lambda_robot, &mut i.lambda_agent, &mut i.lambda_interaction, &mut i.anchor] {
            *x *= c;
        }
        w
    }
}

/// Hinge with inner tolerance: positive when `x` is within `eps` of or beyond
/// a bound. Returns `(value, d value / d x)`.
pub fn hinge(x: f64, lo: f64, hi: f64, eps: f64) -> (f64, f64) {
    if x < lo + eps {
        (lo + eps - x, -1.0)
    } else if x > hi - eps {
        (x - hi + eps, 1.0)
    } else {
        (0.0, 0.0)
    }
}

pub fn joint_limit_residual(q: &DVector<f64>, limits: &[JointLimit], eps: f64) -> Result<DVector<f64>> {
    check_dim(limits.len(), q.len())?;
    Ok(DVector::from_iterator(q.len(), q.iter().zip(limits).map(|(x, l)| hinge(*x, l.min, l.max, eps).0)))
}

/// Same hinge on joint velocities with symmetric bounds `±v_max`.
pub fn joint_velocity_residual(qdot: &DVector<f64>, vmax: &[f64], eps: f64) -> Result<DVector<f64>> {
    check_dim(vmax.len(), qdot.len())?;
    Ok(DVector::from_iterator(qdot.len(), qdot.iter().zip(vmax).map(|(x, v)| hinge(*x, -v, *v, eps).0)))
}

/// `max(0, radius − d)` per sphere.
pub fn obstacle_residual(world: &ObstacleWorld, spheres: &[(Vector3<f64>, f64)]) -> DVector<f64> {
    DVector::from_iterator(spheres.len(), spheres.iter().map(|(c, r)| (r - world.query(c).0).max(0.0)))
}

/// `(velocity, acceleration)` of a clique, both driven toward zero.
pub fn smoothness_residuals(c: &Clique<'_>) -> (DVector<f64>, DVector<f64>) {
    (c.velocity(), c.acceleration())
}

/// `log(R̂ᵀ R)∨`.
pub fn orientation_residual(actual: &Rotation, desired: &Rotation) -> Vector3<f64> {
    log_so3(&(desired.transpose() * *actual))
}

pub fn interaction_terminal_residual(t_r: &Vector3<f64>, t_a: &Vector3<f64>) -> Vector3<f64> {
    t_r - t_a
}

/// `1 − exp(−‖a − b‖²/2σ²)`; zero at coincidence, tending to one far away.
pub fn sparse_reward(a: &Vector3<f64>, b: &Vector3<f64>, sigma: f64) -> f64 {
    1.0 - (-(a - b).norm_squared() / (2.0 * sigma * sigma)).exp()
}

/// Gradient of [`sparse_reward`] with respect to `a`: `w(d)/σ² · (a − b)`.
pub fn sparse_reward_gradient(a: &Vector3<f64>, b: &Vector3<f64>, sigma: f64) -> Vector3<f64> {
    let d = a - b;
    d * (welsch_weight(d.norm(), sigma) / (sigma * sigma))
}
