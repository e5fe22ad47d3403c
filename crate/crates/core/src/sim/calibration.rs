//! Fitting the sphere-agent predictor to recorded reaches.

use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::{CollaborativeProblem, SphereAgent};
use crate::costs::{AgentWeights, Weights};
use crate::error::{Error, Result};
use crate::geometry::{ObstacleWorld, Primitive};
use crate::solver::SolverOptions;
use crate::trajectory::Trajectory;

/// Candidate values for the eight tunable agent weights. Values within a
/// row have distinct ratios so no two configurations are scale-equivalent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamGrid {
    pub velocity: Vec<f64>,
    pub acceleration: Vec<f64>,
    pub obstacle: Vec<f64>,
    pub goal: Vec<f64>,
    pub goal_reward: Vec<f64>,
    pub goal_sigma: Vec<f64>,
    pub stop_velocity: Vec<f64>,
    pub clearance: Vec<f64>,
}

impl Default for ParamGrid {
    fn default() -> Self {
        Self {
            velocity: vec![0.5, 1.0, 2.0],
            acceleration: vec![0.2, 0.5, 1.5],
            obstacle: vec![20.0, 50.0, 120.0],
            goal: vec![0.5, 1.0, 3.0],
            goal_reward: vec![1.0, 2.0, 5.0],
            goal_sigma: vec![0.1, 0.2, 0.4],
            stop_velocity: vec![0.5, 2.0, 4.0],
            clearance: vec![0.0, 0.02, 0.05],
        }
    }
}

impl ParamGrid {
    /// The grid holding exactly `w`.
    pub fn single(w: &AgentWeights) -> Self {
        Self {
            velocity: vec![w.velocity],
            acceleration: vec![w.acceleration],
            obstacle: vec![w.obstacle],
            goal: vec![w.goal],
            goal_reward: vec![w.goal_reward],
            goal_sigma: vec![w.goal_sigma],
            stop_velocity: vec![w.stop_velocity],
            clearance: vec![w.clearance],
        }
    }

    fn rows(&self) -> [(&'static str, &Vec<f64>); 8] {
        [
            ("velocity", &self.velocity),
            ("acceleration", &self.acceleration),
            ("obstacle", &self.obstacle),
            ("goal", &self.goal),
            ("goal_reward", &self.goal_reward),
            ("goal_sigma", &self.goal_sigma),
            ("stop_velocity", &self.stop_velocity),
            ("clearance", &self.clearance),
        ]
    }

    pub fn len(&self) -> usize {
        self.rows().iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.rows() {
            if v.is_empty() {
                return Err(Error::Config(format!("grid.{name} is empty")));
            }
            if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!("grid.{name} has invalid value {x}")));
            }
        }
        if self.goal_sigma.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("grid.goal_sigma values must be positive".into()));
        }
        Ok(())
    }

    /// Every configuration, first row varying slowest.
    pub fn configs(&self) -> Vec<AgentWeights> {
        let mut out = vec![AgentWeights::default()];
        for (name, vals) in self.rows() {
            out = out
                .into_iter()
                .flat_map(|w| {
                    vals.iter().map(move |&x| {
                        let mut w = w.clone();
                        *match name {
                            "velocity" => &mut w.velocity,
                            "acceleration" => &mut w.acceleration,
                            "obstacle" => &mut w.obstacle,
                            "goal" => &mut w.goal,
                            "goal_reward" => &mut w.goal_reward,
                            "goal_sigma" => &mut w.goal_sigma,
                            "stop_velocity" => &mut w.stop_velocity,
                            _ => &mut w.clearance,
                        } = x;
                        w
                    })
                })
                .collect();
        }
        out
    }
}

/// One recorded reach toward a known handover point.
#[derive(Debug, Clone, PartialEq)]
pub struct Reach {
    pub path: Trajectory,
    pub goal: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub world: Arc<ObstacleWorld>,
    pub radius: f64,
    pub reaches: Vec<Reach>,
}

const GATE_PASSES: usize = 8;
const GATE_TOL: f64 = 1e-6;

fn predictor_options() -> SolverOptions {
    SolverOptions { time_budget: None, ..SolverOptions::mpc() }
}

fn to_points(t: &Trajectory) -> Vec<Vector3<f64>> {
    t.knots().iter().map(|k| Vector3::new(k[0], k[1], k[2])).collect()
}

/// Open-loop plan of `knots` positions from `start` toward `goal`,
/// continuing from `previous` when given.
#[allow(clippy::too_many_arguments)]
fn plan(
    world: &Arc<ObstacleWorld>,
    radius: f64,
    weights: &AgentWeights,
    previous: Option<&DVector<f64>>,
    start: &DVector<f64>,
    goal: Vector3<f64>,
    knots: usize,
    dt: f64,
) -> Result<Vec<Vector3<f64>>> {
    let mut agent = SphereAgent::new(Trajectory::constant(start, knots.saturating_sub(2), dt)?);
    agent.previous = previous.cloned();
    agent.radius = radius;
    agent.goal = Some(goal);
    let w = Weights { agent: weights.clone(), ..Weights::default() };
    let mut problem = CollaborativeProblem::new(None, vec![agent], world.clone(), w);
    // The stopping gate is read off the initial guess; re-solving from the
    // previous answer settles it at its own solution.
    let mut last: Option<Trajectory> = None;
    for _ in 0..GATE_PASSES {
        let sol = problem.solve(&predictor_options())?;
        let next = sol.agents.into_iter().next().expect("one agent");
        let settled = last.as_ref().is_some_and(|l| {
            l.knots().iter().zip(next.knots()).all(|(a, b)| (a - b).amax() < GATE_TOL)
        });
        problem.agents[0].trajectory = next.clone();
        last = Some(next);
        if settled {
            break;
        }
    }
    Ok(to_points(&last.expect("at least one pass")))
}

/// Predicted hand path from step `t` to the end of `reach`, anchored at
/// the measurement at `t` and continuing the measured velocity into it.
/// Needs `t ≤ T − 2`.
pub fn predict_from(
    world: &Arc<ObstacleWorld>,
    radius: f64,
    weights: &AgentWeights,
    reach: &Reach,
    t: usize,
) -> Result<Vec<Vector3<f64>>> {
    let last = reach.path.len() - 1;
    if t + 2 > last {
        return Err(Error::TooShort { horizon: last.saturating_sub(t + 1) });
    }
    let previous = t.checked_sub(1).map(|p| reach.path.knot(p));
    plan(world, radius, weights, previous, reach.path.knot(t), reach.goal, last - t + 1, reach.path.dt())
}

/// RMS prediction error in cm. `predicted[t]` covers steps `t..=T` for
/// each replan step `t ≤ T − 2`; each step averages the squared error over
/// its future knots `(t, T]`.
pub fn prediction_loss(predicted: &[Vec<Vector3<f64>>], measured: &[Vector3<f64>]) -> Result<f64> {
    let big_t = measured.len().saturating_sub(1);
    let replans = big_t.saturating_sub(1);
    if replans == 0 || predicted.len() != replans {
        return Err(Error::DimensionMismatch { expected: replans, got: predicted.len() });
    }
    let mut total = 0.0;
    for (t, pred) in predicted.iter().enumerate() {
        let need = big_t - t + 1;
        if pred.len() < need {
            return Err(Error::DimensionMismatch { expected: need, got: pred.len() });
        }
        let sq: f64 = (t + 1..=big_t).map(|i| (pred[i - t] - measured[i]).norm_squared()).sum();
        total += sq / (big_t - t) as f64;
    }
    Ok(100.0 * (total / replans as f64).sqrt())
}

/// Mean prediction loss over every reach in the set.
pub fn evaluate_config(set: &CalibrationSet, weights: &AgentWeights) -> Result<f64> {
    let mut sum = 0.0;
    for reach in &set.reaches {
        let last = reach.path.len() - 1;
        let preds = (0..last.saturating_sub(1))
            .map(|t| predict_from(&set.world, set.radius, weights, reach, t))
            .collect::<Result<Vec<_>>>()?;
        sum += prediction_loss(&preds, &to_points(&reach.path))?;
    }
    Ok(sum / set.reaches.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEntry {
    /// Position in [`ParamGrid::configs`] order.
    pub index: usize,
    pub loss_cm: f64,
    pub weights: AgentWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: AgentWeights,
    pub best_loss_cm: f64,
    pub evaluated: usize,
    /// Ascending loss, ties broken by index.
    pub leaderboard: Vec<TuneEntry>,
}

/// Exhaustive search; configurations whose solve fails score infinity.
pub fn grid_search_tune(grid: &ParamGrid, set: &CalibrationSet) -> Result<TuneResult> {
    grid.validate()?;
    if set.reaches.is_empty() {
        return Err(Error::Config("calibration set has no reaches".into()));
    }
    let configs = grid.configs();
    let mut leaderboard: Vec<TuneEntry> = configs
        .into_par_iter()
        .enumerate()
        .map(|(index, weights)| {
            let loss_cm = evaluate_config(set, &weights).unwrap_or_else(|e| {
                log::warn!("config {index} failed: {e}");
                f64::INFINITY
            });
            TuneEntry { index, loss_cm, weights }
        })
        .collect();
    leaderboard.sort_by(|a, b| a.loss_cm.total_cmp(&b.loss_cm).then(a.index.cmp(&b.index)));
    let best = leaderboard[0].clone();
    Ok(TuneResult { best: best.weights, best_loss_cm: best.loss_cm, evaluated: leaderboard.len(), leaderboard })
}

/// A post between the reach start and goal regions.
pub fn default_calibration_world() -> ObstacleWorld {
    ObstacleWorld::new(vec![Primitive::Sphere { center: Vector3::new(0.75, 0.0, 0.45), radius: 0.08 }])
        .expect("valid world")
}

/// Reaches planned by the predictor under `truth`, plus Gaussian knot
/// noise of `noise_sd` meters. Stands in for recorded human data.
pub fn synthetic_reaches(
    world: ObstacleWorld,
    radius: f64,
    truth: &AgentWeights,
    n: usize,
    horizon: usize,
    dt: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<CalibrationSet> {
    let world = Arc::new(world);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut reaches = Vec::with_capacity(n);
    while reaches.len() < n {
        let start = Vector3::new(rng.gen_range(0.95..1.15), rng.gen_range(-0.15..0.15), rng.gen_range(0.35..0.55));
        let goal = Vector3::new(rng.gen_range(0.45..0.55), rng.gen_range(-0.15..0.15), rng.gen_range(0.35..0.55));
        if world.signed_distance(&start) < radius || world.signed_distance(&goal) < radius {
            continue;
        }
        let start = DVector::from_column_slice(start.as_slice());
        let clean = plan(&world, radius, truth, None, &start, goal, horizon + 2, dt)?;
        let knots = clean
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let e = if i == 0 { Vector3::zeros() } else { Vector3::from_fn(|_, _| noise.sample(&mut rng)) };
                DVector::from_column_slice((p + e).as_slice())
            })
            .collect();
        reaches.push(Reach { path: Trajectory::new(knots, dt)?, goal });
    }
    Ok(CalibrationSet { world, radius, reaches })
}
