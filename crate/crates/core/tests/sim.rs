use std::sync::Arc;

use collab_mpc::costs::AgentWeights;
use collab_mpc::geometry::{ObstacleWorld, Primitive};
use collab_mpc::kinematics::{franka_like, franka_ready};
use collab_mpc::sim::{
    aggregate, compute_metrics, default_calibration_world, derive_seed, generate_uncontrolled_trajectory,
    grid_search_tune, mutual_successes, prediction_loss, synthetic_reaches, ParamGrid, Policy, PreparedTrial,
    ScenarioConfig, SimConfig, Simulator, TrialResult, UncontrolledSpec,
};
use collab_mpc::trajectory::Trajectory;
use collab_mpc::Error;
use nalgebra::{DVector, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn v3(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

fn scenario(world: ObstacleWorld, start: Vector3<f64>, goal: Vector3<f64>) -> ScenarioConfig {
    ScenarioConfig {
        seed: 0,
        world,
        agent_start: start,
        agent_goal: goal,
        agent_radius: 0.05,
        robot_start: franka_ready(),
        workspace_min: v3(-1.0, -1.0, 0.0),
        workspace_max: v3(2.0, 1.0, 1.5),
    }
}

fn quiet() -> UncontrolledSpec {
    UncontrolledSpec { noise_amplitude: 0.0, ..UncontrolledSpec::default() }
}

/// Free space, agent starting close in and stopping within easy reach.
fn easy_config() -> SimConfig {
    let mut c = SimConfig::default();
    c.scenario.obstacle_count_min = 0;
    c.scenario.obstacle_count_max = 0;
    c.scenario.agent_start_min = v3(0.75, -0.1, 0.40);
    c.scenario.agent_start_max = v3(0.80, 0.1, 0.50);
    c.scenario.agent_goal_min = v3(0.55, -0.1, 0.40);
    c.scenario.agent_goal_max = v3(0.60, 0.1, 0.50);
    c.uncontrolled.horizon = 10;
    c
}

fn simulator(c: SimConfig) -> Simulator {
    Simulator::new(Arc::new(franka_like()), c).unwrap()
}

fn points(xs: &[f64]) -> Vec<Vector3<f64>> {
    xs.iter().map(|x| v3(*x, 0.0, 0.0)).collect()
}

#[test]
fn metrics_match_hand_computation_on_cubic_path() {
    // x = i³ cm: second differences 6i cm, constant third difference 6 cm.
    let path = points(&[0.0, 0.01, 0.08, 0.27, 0.64]);
    let m = compute_metrics(&path, 0.1, 5);
    assert!((m.handover_time_normalized - 0.8).abs() < 1e-12);
    assert!((m.trajectory_length_error - 0.2).abs() < 1e-12);
    assert!((m.mean_acceleration_cm - 1200.0).abs() < 1e-6, "{}", m.mean_acceleration_cm);
    assert!((m.mean_jerk_cm - 6000.0).abs() < 1e-6, "{}", m.mean_jerk_cm);
}

#[test]
fn slower_handover_gives_positive_length_error() {
    let path = points(&vec![0.0; 13]);
    let m = compute_metrics(&path, 0.1, 10);
    assert!((m.handover_time_normalized - 1.2).abs() < 1e-12);
    assert!((m.trajectory_length_error - 0.2).abs() < 1e-12);
}

#[test]
fn constant_velocity_has_no_acceleration_or_jerk() {
    let path: Vec<f64> = (0..12).map(|i| 0.03 * i as f64).collect();
    let m = compute_metrics(&points(&path), 0.1, 11);
    assert!(m.mean_acceleration_cm < 1e-9);
    assert!(m.mean_jerk_cm < 1e-9);
    assert_eq!(m.trajectory_length_error, 0.0);
}

#[test]
fn free_space_uncontrolled_path_is_straight() {
    let (a, b) = (v3(1.1, 0.2, 0.4), v3(0.5, -0.1, 0.5));
    let sc = scenario(ObstacleWorld::empty(), a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let traj = generate_uncontrolled_trajectory(&sc, &quiet(), 0.1, &mut rng).unwrap();
    assert_eq!(traj.len(), 21);
    let dir = (b - a).normalize();
    for k in traj.knots() {
        let p = v3(k[0], k[1], k[2]) - a;
        let lateral = (p - dir * p.dot(&dir)).norm();
        assert!(lateral < 0.01, "lateral {lateral}");
    }
    let end = traj.knots().last().unwrap();
    assert!((v3(end[0], end[1], end[2]) - b).norm() < 0.01);
}

#[test]
fn coincident_endpoints_give_noise_around_a_constant() {
    let a = v3(0.7, 0.0, 0.5);
    let sc = scenario(ObstacleWorld::empty(), a, a);
    let spec = UncontrolledSpec { noise_amplitude: 0.01, ..UncontrolledSpec::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let traj = generate_uncontrolled_trajectory(&sc, &spec, 0.1, &mut rng).unwrap();
    assert_eq!(traj.knot(0), &DVector::from_column_slice(a.as_slice()));
    for k in traj.knots() {
        assert!((v3(k[0], k[1], k[2]) - a).amax() <= 0.01 + 1e-9);
    }
}

#[test]
fn uncontrolled_path_detours_around_obstacle() {
    let world = ObstacleWorld::new(vec![Primitive::Sphere { center: v3(0.8, 0.0, 0.45), radius: 0.08 }]).unwrap();
    let sc = scenario(world.clone(), v3(1.1, 0.02, 0.45), v3(0.5, 0.0, 0.45));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match generate_uncontrolled_trajectory(&sc, &quiet(), 0.1, &mut rng) {
        Ok(traj) => {
            for k in traj.knots() {
                let d = world.signed_distance(&v3(k[0], k[1], k[2])) - sc.agent_radius;
                assert!(d >= -0.05, "penetration {d}");
            }
        }
        Err(Error::InfeasibleScenario { .. }) => {}
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn drawn_scenarios_satisfy_their_constraints() {
    let sim = simulator(SimConfig::default());
    let spec = sim.config().scenario.clone();
    for i in 0..20 {
        let sc = sim.draw_scenario(derive_seed(9, i)).unwrap();
        for p in [sc.agent_start, sc.agent_goal] {
            assert!(sc.world.signed_distance(&p) > spec.agent_radius);
        }
        assert!(sim.reachable(&sc.agent_goal));
        assert!((0..3).all(|a| sc.agent_goal[a] >= spec.agent_goal_min[a] && sc.agent_goal[a] <= spec.agent_goal_max[a]));
        assert!(!sc.world.is_empty());
    }
}

#[test]
fn stationary_agent_within_reach_is_met_by_every_policy() {
    let sim = simulator(easy_config());
    let chain = franka_like();
    let ee = chain.forward_kinematics(&franka_ready()).unwrap().translation;
    let hand = ee + v3(0.2, 0.1, 0.0);
    let p = DVector::from_column_slice(hand.as_slice());
    let prepared = PreparedTrial {
        trial: 0,
        seed: 5,
        scenario: scenario(ObstacleWorld::empty(), hand, hand),
        uncontrolled: Trajectory::constant(&p, 10, 0.1).unwrap(),
        redraws: 0,
    };
    for policy in Policy::ALL {
        let run = sim.run_trial(&prepared, policy, 0.0).unwrap();
        assert!(run.result.success, "{policy} ended {} cm away", run.result.final_distance_cm);
        assert_eq!(run.ee_path.len(), run.result.t_success.unwrap() + 1);
        assert!(run.result.final_distance_cm < 10.0);
    }
}

#[test]
fn trial_is_deterministic_with_noise() {
    let sim = simulator(SimConfig::default());
    let prepared = sim.prepare_trial(0, 11).unwrap();
    let a = sim.run_trial(&prepared, Policy::Ours, 5.0).unwrap();
    let b = sim.run_trial(&prepared, Policy::Ours, 5.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn negative_noise_is_rejected() {
    let sim = simulator(easy_config());
    let prepared = sim.prepare_trial(0, 1).unwrap();
    assert!(matches!(sim.run_trial(&prepared, Policy::Ours, -1.0), Err(Error::Config(_))));
    assert!(matches!(sim.run_noise_sweep(&[f64::NAN], 1, 0), Err(Error::Config(_))));
}

#[test]
fn single_trial_benchmark_reports_each_policy() {
    let sim = simulator(easy_config());
    let b = sim.run_benchmark(1, &Policy::ALL, 2).unwrap();
    assert_eq!(b.results.len(), 3);
    assert!(b.results.iter().all(|r| r.success), "{:?}", b.results);
    assert_eq!(b.mutual_trials, vec![0]);
    assert!(b.summary.iter().all(|s| s.mutual == 1 && s.success_rate == 1.0));
    assert!(matches!(sim.run_benchmark(0, &Policy::ALL, 2), Err(Error::Config(_))));
}

#[test]
fn benchmark_repeats_exactly() {
    let sim = simulator(SimConfig::default());
    let a = sim.run_benchmark(2, &Policy::ALL, 4).unwrap();
    let b = sim.run_benchmark(2, &Policy::ALL, 4).unwrap();
    assert_eq!(a.results, b.results);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

fn result(trial: usize, policy: Policy, time: Option<f64>) -> TrialResult {
    TrialResult {
        trial,
        seed: trial as u64,
        policy,
        sigma_cm: 0.0,
        success: time.is_some(),
        t_uncontrolled: 10,
        t_success: time.map(|t| (t * 10.0) as usize),
        handover_time_normalized: time,
        trajectory_length_error: time.map(|t| (1.0 - t).abs()),
        mean_acceleration_cm: time,
        mean_jerk_cm: time,
        final_distance_cm: if time.is_some() { 5.0 } else { 30.0 },
    }
}

#[test]
fn statistics_use_only_mutual_successes() {
    let pols = [Policy::Ours, Policy::RobotOnly];
    let rs = vec![
        result(0, Policy::Ours, Some(1.0)),
        result(0, Policy::RobotOnly, Some(1.5)),
        result(1, Policy::Ours, Some(9.0)),
        result(1, Policy::RobotOnly, None),
        result(2, Policy::Ours, Some(1.2)),
        result(2, Policy::RobotOnly, Some(1.1)),
    ];
    assert_eq!(mutual_successes(&rs, &pols), vec![0, 2]);
    let (summary, mutual) = aggregate(&rs, &pols);
    assert_eq!(mutual, vec![0, 2]);
    let ours = &summary[0];
    assert_eq!((ours.trials, ours.successes, ours.mutual), (3, 3, 2));
    assert!((ours.time_mean - 1.1).abs() < 1e-12);
    assert!((ours.time_std - (0.02f64).sqrt()).abs() < 1e-12);
    assert!((summary[1].success_rate - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn noise_free_sweep_on_easy_pool_always_succeeds() {
    let sim = simulator(easy_config());
    let (rows, results) = sim.run_noise_sweep(&[0.0], 4, 8).unwrap();
    assert_eq!(results.len(), 4);
    assert_eq!(rows[0].success_rate_pct, 100.0);
}

#[test]
fn policy_names_round_trip() {
    for p in Policy::ALL {
        assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
    }
    assert!("human".parse::<Policy>().is_err());
}

#[test]
fn config_validation_rejects_bad_ranges() {
    let mut c = SimConfig::default();
    c.scenario.agent_goal_min.x = 2.0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = SimConfig::default();
    c.robot_speed_scale = 0.0;
    assert!(c.validate().is_err());
    let c: SimConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(c, SimConfig::default());
    assert!(serde_json::from_str::<SimConfig>(r#"{"bogus": 1}"#).is_err());
}

fn line(n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|i| v3(0.1 * i as f64, 0.0, 0.0)).collect()
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let measured = line(6);
    let preds: Vec<Vec<Vector3<f64>>> = (0..4).map(|t| measured[t..].to_vec()).collect();
    assert_eq!(prediction_loss(&preds, &measured).unwrap(), 0.0);
}

#[test]
fn constant_offset_reports_its_size_in_cm() {
    let measured = line(6);
    let off = v3(0.0, 0.006, 0.008);
    let preds: Vec<Vec<Vector3<f64>>> = (0..4).map(|t| measured[t..].iter().map(|p| p + off).collect()).collect();
    assert!((prediction_loss(&preds, &measured).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn prediction_loss_checks_dimensions() {
    let measured = line(6);
    let preds: Vec<Vec<Vector3<f64>>> = (0..3).map(|t| measured[t..].to_vec()).collect();
    assert!(matches!(prediction_loss(&preds, &measured), Err(Error::DimensionMismatch { .. })));
    let short: Vec<Vec<Vector3<f64>>> = (0..4).map(|_| measured[..2].to_vec()).collect();
    assert!(matches!(prediction_loss(&short, &measured), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn default_grid_has_every_combination() {
    let g = ParamGrid::default();
    assert_eq!(g.len(), 6561);
    let configs = g.configs();
    assert_eq!(configs.len(), 6561);
    assert_eq!(configs[0].velocity, 0.5);
    assert_eq!(configs[0].clearance, 0.0);
    assert_eq!(configs[1].clearance, 0.02);
    assert_eq!(configs[6560].velocity, 2.0);
}

#[test]
fn single_config_grid_returns_it() {
    let truth = AgentWeights::default();
    let set = synthetic_reaches(default_calibration_world(), 0.05, &truth, 1, 8, 0.1, 0.0, 1).unwrap();
    let r = grid_search_tune(&ParamGrid::single(&truth), &set).unwrap();
    assert_eq!(r.evaluated, 1);
    assert_eq!(r.best, truth);
    assert!(r.best_loss_cm < 0.05, "{}", r.best_loss_cm);
}

#[test]
fn tuning_recovers_the_generating_weights() {
    let truth = AgentWeights { velocity: 2.0, goal: 3.0, ..AgentWeights::default() };
    let set = synthetic_reaches(default_calibration_world(), 0.05, &truth, 2, 10, 0.1, 0.002, 4).unwrap();
    let mut grid = ParamGrid::single(&truth);
    grid.velocity = vec![0.5, 2.0];
    grid.goal = vec![0.5, 3.0];
    grid.acceleration = vec![truth.acceleration, 1.5];
    let r = grid_search_tune(&grid, &set).unwrap();
    assert_eq!(r.evaluated, 8);
    assert_eq!(r.best, truth, "{:?}", r.leaderboard.iter().map(|e| e.loss_cm).collect::<Vec<_>>());
    assert!(r.leaderboard.windows(2).all(|w| w[0].loss_cm <= w[1].loss_cm));
}

#[test]
fn empty_grid_row_is_a_config_error() {
    let mut g = ParamGrid::default();
    g.goal_sigma.clear();
    let set = synthetic_reaches(default_calibration_world(), 0.05, &AgentWeights::default(), 1, 6, 0.1, 0.0, 1).unwrap();
    assert!(matches!(grid_search_tune(&g, &set), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn length_error_is_distance_of_ratio_from_one(len in 1usize..40, t_unc in 1usize..30) {
        let m = compute_metrics(&vec![Vector3::zeros(); len + 1], 0.1, t_unc);
        prop_assert!((m.trajectory_length_error - (1.0 - len as f64 / t_unc as f64).abs()).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_translation_invariant(xs in prop::collection::vec(-1.0f64..1.0, 6..12), s in -2.0f64..2.0) {
        let a: Vec<Vector3<f64>> = xs.iter().map(|x| v3(*x, x * x, 0.0)).collect();
        let b: Vec<Vector3<f64>> = a.iter().map(|p| p + Vector3::repeat(s)).collect();
        let (ma, mb) = (compute_metrics(&a, 0.1, 5), compute_metrics(&b, 0.1, 5));
        prop_assert!((ma.mean_acceleration_cm - mb.mean_acceleration_cm).abs() < 1e-6 * ma.mean_acceleration_cm.max(1.0));
        prop_assert!((ma.mean_jerk_cm - mb.mean_jerk_cm).abs() < 1e-6 * ma.mean_jerk_cm.max(1.0));
    }

    #[test]
    fn derived_seeds_do_not_collide(base in any::<u64>()) {
        let seeds: std::collections::BTreeSet<u64> = (0..64).map(|i| derive_seed(base, i)).collect();
        prop_assert_eq!(seeds.len(), 64);
    }
}
