use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};

use super::{hinge, ResidualKind};
use crate::geometry::{right_jacobian_inv, ObstacleWorld, Rotation};
use crate::kinematics::{ChainState, JointLimit, SerialChain};
use crate::solver::{Factor, Kernel, Linearization};

fn to_dmatrix<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<f64, R, C>>(
    m: &nalgebra::Matrix<f64, R, C, S>,
) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn chain_state(chain: &SerialChain, q: &DVector<f64>) -> ChainState {
    chain.state(q).expect("factor keys are sized to the chain")
}

/// `x − target`: holds a knot at an observation.
pub struct AnchorFactor {
    keys: [usize; 1],
    target: DVector<f64>,
    weight: f64,
}

impl AnchorFactor {
    pub fn new(key: usize, target: DVector<f64>, weight: f64) -> Self {
        Self { keys: [key], target, weight }
    }
}

impl Factor for AnchorFactor {
    fn keys(&self) -> &[usize] {
        &self.keys
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn label(&self) -> &'static str {
        ResidualKind::Anchor.as_str()
    }
    fn linearize(&self, v: &[&DVector<f64>]) -> Linearization {
        let n = self.target.len();
        Linearization { residual: v[0] - &self.target, jacobians: vec![DMatrix::identity(n, n)] }
    }
}

pub struct JointLimitFactor {
    keys: [usize; 1],
    limits: Vec<JointLimit>,
    eps: f64,
    weight: f64,
}

impl JointLimitFactor {
    pub fn new(key: usize, limits: Vec<JointLimit>, eps: f64, weight: f64) -> Self {
        Self { keys: [key], limits, eps, weight }
    }
}

impl Factor for JointLimitFactor {
    fn keys(&self) -> &[usize] {
        &self.keys
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn label(&self) -> &'static str {
        ResidualKind::JointLimit.as_str()
    }
    fn linearize(&self, v: &[&DVector<f64>]) -> Linearization {
        let n = self.limits.len();
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, n);
        for (i, l) in self.limits.iter().enumerate() {
            let (val, slope) = hinge(v[0][i], l.min, l.max, self.eps);
            r[i] = val;
            j[(i, i)] = slope;
        }
        Linearization { residual: r, jacobians: vec![j] }
    }
}

/// Velocity-limit hinge on a clique's central-difference velocity.
pub struct JointVelocityFactor {
    keys: [usize; 3],
    vmax: Vec<f64>,
    eps: f64,
    dt: f64,
    weight: f64,
}

impl JointVelocityFactor {
    pub fn new(keys: [usize; 3], vmax: Vec<f64>, eps: f64, dt: f64, weight: f64) -> Self {
        Self { keys, vmax, eps, dt, weight }
    }
}

impl Factor for JointVelocityFactor {
    fn keys(&self) -> &[usize] {
        &self.keys
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn label(&self) -> &'static str {
        ResidualKind::JointVelLimit.as_str()
    }
    fn linearize(&self, v: &[&DVector<f64>]) -> Linearization {
        let n = self.vmax.len();
        let inv = 1.0 / (2.0 * self.dt);
        let mut r = DVector::zeros(n);
        let mut jp = DMatrix::zeros(n, n);
        let mut jn = DMatrix::zeros(n, n);
        for i in 0..n {
            let qd = (v[2][i] - v[0][i]) * inv;
            let (val, slope) = hinge(qd, -self.vmax[i], self.vmax[i], self.eps);
            r[i] = val;
            jp[(i, i)] = -slope * inv;
            jn[(i, i)] = slope * inv;
        }
        Linearization { residual: r, jacobians: vec![jp, DMatrix::zeros(n, n), jn] }
    }
}

/// Skeleton-sphere penetration `max(0, radius − d)` per sphere.
pub struct RobotObstacleFactor {
    keys: [usize; 1],
    chain: Arc<SerialChain>,
    world: Arc<ObstacleWorld>,
    weight: f64,
}

impl RobotObstacleFactor {
    pub fn new(key: usize, chain: Arc<SerialChain>, world: Arc<ObstacleWorld>, weight: f64) -> Self {
        Self { keys: [key], chain, world, weight }
    }
}

impl Factor for RobotObstacleFactor {
    fn keys(&self) -> &[usize] {
        &self.keys
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn label(&self) -> &'static str {
        ResidualKind::Obstacle.as_str()
    }
    fn residual(&self, v: &[&DVector<f64>]) -> DVector<f64> {
        let st = chain_state(&self.chain, v[0]);
        super::obstacle_residual(&self.world, &self.chain.skeleton_from_state(&st))
    }
    fn linearize(&self, v: &[&DVector<f64>]) -> Linearization {
        let st = chain_state(&self.chain, v[0]);
        let m = self.chain.skeleton.len();
        let n = self.chain.dof();
        let mut r = DVector::zeros(m);
        let mut j = DMatrix::zeros(m, n);
        for (i, s) in self.chain.skeleton.iter().enumerate() {
            let c = st.frames[s.link].transform_point(&s.offset);
            let (d, g) = self.world.query(&c);
            if d < s.radius {
                r[i] = s.radius - d;
                let row = -(g.transpose() * st.point_jacobian(s.link, &c));
                for k in 0..n {
                    j[(i, k)] = row[k];
                }
            }
        }
        Linearization { residual: r, jacobians: vec![j] }
    }
}

/// Hand-sphere penetration `max(0, radius − d)`.
pub struct SphereObstacleFactor {
    keys: [usize; 1],
    world: Arc<ObstacleWorld>,
    radius: f64,
    weight: f64,
}

impl SphereObstacleFactor {
    pub fn new(key: usize, world: Arc<ObstacleWorld>, radius: f64, weight: f64) -> Self {
        Self { keys: [key], world, radius, weight }
    }
}

impl Factor for SphereObstacleFactor {
    fn keys(&self) -> &[usize] {
        &self.keys
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn label(&self) -> &'static str {
        ResidualKind::Obstacle.as_str()
    }
    fn linearize(&self, v: &[&DVector<f64>]) -> Linearization {
        let p = Vector3::new(v[0][0], v[0][1], v[0][2]);
        let (d, g) = self.world.query(&p);
        let mut j = DMatrix::zeros(1, 3);
        let r = if d < self.radius {
            for k in 0..3 {
                j[(0, k)] = -g[k];
            }
            self.radius - d
        } else {
            0.0
        };
        Linearization { residual: DVector::from_element(1, r), jacobians: vec![j] }
    }
}

/// Central-difference velocity `(next − prev)/2dt` driven to zero.
pub struct VelocityFactor {
    keys: [usize; 3],
    dt: f64,
    weight: f64,
    kind: ResidualKind,
}

impl VelocityFactor {
    pub fn new(keys: [usize; 3], dt: f64, weight: f64) -> Self {
        Self { keys, dt, weight, kind: ResidualKind::Velocity }
    }

    /// Same residual, labelled as the proximity-gated braking term.
    pub fn stopping(keys: [usize; 3], dt: f64, weight: f64) -> Self {
        Self { keys, dt, weight, kind: ResidualKind::StopVelocity }
    }
}

impl Factor for VelocityFactor {
    fn keys(&self) -> &[usize] {
        &self.keys
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn label(&self) -> &'static str {
        self.kind.as_str()
    }
    fn linearize(&self, v: &[&DVector<f64>]) -> Linearization {
        let n = v[0].len();
        let inv = 1.0 / (2.0 * self.dt);
        Linearization {
            residual: (v[2] - v[0]) * inv,
            jacobians: vec![DMatrix::identity(n, n) * -inv, DMatrix::zeros(n, n), DMatrix::identity(n, n) * inv],
        }
    }
}

/// Second difference `(next − 2 cur + prev)/dt²` driven to zero.
pub struct AccelerationFactor {
    keys: [usize; 3],
    dt: f64,
    weight: f64,
}

impl AccelerationFactor {
    pub fn new(keys: [usize; 3], dt: f64, weight: f64) -> Self {
        Self { keys, dt, weight }
    }
}

impl Factor for AccelerationFactor {
    fn keys(&self) -> &[usize] {
        &self.keys
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn label(&self) -> &'static str {
        ResidualKind::Acceleration.as_str()
    }
    fn linearize(&self, v: &[&DVector<f64>]) -> Linearization {
        let n = v[0].len();
        let inv = 1.0 / (self.dt * self.dt);
        let id = DMatrix::<f64>::identity(n, n);
        Linearization {
            residual: (v[2] - v[1] * 2.0 + v[0]) * inv,
            jacobians: vec![&id * inv, &id * (-2.0 * inv), &id * inv],
        }
    }
}

/// `log(R̂ᵀ R(q))∨` against a fixed desired end-effector rotation.
pub struct OrientationFactor {
    keys: [usize; 1],
    chain: Arc<SerialChain>,
    desired: Rotation,
    weight: f64,
}

impl OrientationFactor {
    pub fn new(key: usize, chain: Arc<SerialChain>, desired: Rotation, weight: f64) -> Self {
        Self { keys: [key], chain, desired, weight }
    }
}

impl Factor for OrientationFactor {
    fn keys(&self) -> &[usize] {
        &self.keys
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn label(&self) -> &'static str {
        ResidualKind::Orientation.as_str()
    }
    fn linearize(&self, v: &[&DVector<f64>]) -> Linearization {
        let st = chain_state(&self.chain, v[0]);
        let rot = st.ee.rotation;
        let r = super::orientation_residual(&rot, &self.desired);
        // R ← exp(ω̂) R with ω = J_ang δq, so the body-frame increment is Rᵀω.
        let j = right_jacobian_inv(&r) * rot.transpose().matrix() * st.angular_jacobian(self.chain.dof());
        Linearization { residual: DVector::from_column_slice(r.as_slice()), jacobians: vec![to_dmatrix(&j)] }
    }
}

/// A 3-D point taking part in a point-difference residual.
#[derive(Clone)]
pub enum Endpoint {
    /// End-effector position of the robot knot `key`.
    RobotEe { key: usize, chain: Arc<SerialChain> },
    /// A 3-D position block.
    Point { key: usize },
    Fixed(Vector3<f64>),
}

impl Endpoint {
    fn key(&self) -> Option<usize> {
        match self {
            Endpoint::RobotEe { key, .. } | Endpoint::Point { key } => Some(*key),
            Endpoint::Fixed(_) => None,
        }
    }

    fn eval(&self, v: Option<&DVector<f64>>, jac: bool) -> (Vector3<f64>, Option<DMatrix<f64>>) {
        match self {
            Endpoint::RobotEe { chain, .. } => {
                let st = chain_state(chain, v.unwrap());
                let p = st.ee_position();
                let j = jac.then(|| to_dmatrix(&st.point_jacobian(chain.dof(), &p)));
                (p, j)
            }
            Endpoint::Point { .. } => {
                let v = v.unwrap();
                (Vector3::new(v[0], v[1], v[2]), jac.then(|| DMatrix::identity(3, 3)))
            }
            Endpoint::Fixed(p) => (*p, None),
        }
    }
}

/// `p_a − p_b` between two endpoints; squared for the terminal interaction
/// and goal attraction, Welsch for sparse rewards.
pub struct PointDifferenceFactor {
    keys: Vec<usize>,
    a: Endpoint,
    b: Endpoint,
    weight: f64,
    kernel: Kernel,
    kind: ResidualKind,
}

impl PointDifferenceFactor {
    pub fn new(a: Endpoint, b: Endpoint, weight: f64, kernel: Kernel, kind: ResidualKind) -> Self {
        let keys = a.key().into_iter().chain(b.key()).collect();
        Self { keys, a, b, weight, kernel, kind }
    }

    fn split<'a>(&self, v: &[&'a DVector<f64>]) -> (Option<&'a DVector<f64>>, Option<&'a DVector<f64>>) {
        let mut it = v.iter().copied();
        let va = self.a.key().and_then(|_| it.next());
        let vb = self.b.key().and_then(|_| it.next());
        (va, vb)
    }
}

impl Factor for PointDifferenceFactor {
    fn keys(&self) -> &[usize] {
        &self.keys
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn kernel(&self) -> Kernel {
        self.kernel
    }
    fn label(&self) -> &'static str {
        self.kind.as_str()
    }
    fn residual(&self, v: &[&DVector<f64>]) -> DVector<f64> {
        let (va, vb) = self.split(v);
        let d = self.a.eval(va, false).0 - self.b.eval(vb, false).0;
        DVector::from_column_slice(d.as_slice())
    }
    fn linearize(&self, v: &[&DVector<f64>]) -> Linearization {
        let (va, vb) = self.split(v);
        let (pa, ja) = self.a.eval(va, true);
        let (pb, jb) = self.b.eval(vb, true);
        let mut jacobians = Vec::with_capacity(2);
        jacobians.extend(ja);
        jacobians.extend(jb.map(|j| -j));
        Linearization { residual: DVector::from_column_slice((pa - pb).as_slice()), jacobians }
    }
}

impl ResidualKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResidualKind::JointLimit => "joint_limit",
            ResidualKind::JointVelLimit => "joint_vel_limit",
            ResidualKind::Obstacle => "obstacle",
            ResidualKind::Velocity => "velocity",
            ResidualKind::Acceleration => "acceleration",
            ResidualKind::Orientation => "orientation",
            ResidualKind::Anchor => "anchor",
            ResidualKind::InteractionTerminal => "interaction_terminal",
            ResidualKind::SparseReward => "sparse_reward",
            ResidualKind::GoalAttraction => "goal_attraction",
            ResidualKind::StopVelocity => "stop_velocity",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Primitive;
    use crate::kinematics::{franka_like, planar_chain};
    use crate::solver::jacobian_fd_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world() -> Arc<ObstacleWorld> {
        Arc::new(
            ObstacleWorld::new(vec![
                Primitive::Sphere { center: Vector3::new(0.4, 0.1, 0.5), radius: 0.2 },
                Primitive::Capsule { p0: Vector3::new(0.3, -0.4, 0.2), p1: Vector3::new(0.3, 0.4, 0.6), radius: 0.1 },
            ])
            .unwrap(),
        )
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-s..s))
    }

    fn check(f: &dyn Factor, vals: &[DVector<f64>]) {
        let refs: Vec<&DVector<f64>> = vals.iter().collect();
        let e = jacobian_fd_error(f, &refs, 1e-6);
        assert!(e < 1e-5, "{} error {e}", f.label());
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let chain = Arc::new(franka_like());
        let n = chain.dof();
        let desired = Rotation::from_rpy(0.4, 2.8, -0.3);
        for _ in 0..10 {
            let q = rand_vec(&mut rng, n, 2.0);
            let q3: Vec<DVector<f64>> = (0..3).map(|_| rand_vec(&mut rng, n, 0.5)).collect();
            let p3: Vec<DVector<f64>> = (0..3).map(|_| rand_vec(&mut rng, 3, 1.0)).collect();
            check(&JointLimitFactor::new(0, chain.joint_limits.clone(), 0.05, 1.0), &[q.clone()]);
            check(&JointVelocityFactor::new([0, 1, 2], chain.velocity_limits.clone(), 0.05, 0.1, 1.0), &q3);
            check(&RobotObstacleFactor::new(0, chain.clone(), world(), 1.0), &[q.clone()]);
            check(&SphereObstacleFactor::new(0, world(), 0.1, 1.0), &p3[..1]);
            check(&VelocityFactor::new([0, 1, 2], 0.1, 1.0), &q3);
            check(&AccelerationFactor::new([0, 1, 2], 0.1, 1.0), &p3);
            check(&OrientationFactor::new(0, chain.clone(), desired, 1.0), &[q.clone()]);
            check(&AnchorFactor::new(0, rand_vec(&mut rng, n, 1.0), 1.0), &[q.clone()]);
            let ee = Endpoint::RobotEe { key: 0, chain: chain.clone() };
            let term = PointDifferenceFactor::new(
                ee.clone(),
                Endpoint::Point { key: 1 },
                1.0,
                Kernel::Squared,
                ResidualKind::InteractionTerminal,
            );
            check(&term, &[q.clone(), p3[0].clone()]);
            let goal = PointDifferenceFactor::new(
                Endpoint::Point { key: 0 },
                Endpoint::Fixed(Vector3::new(0.5, 0.0, 0.3)),
                1.0,
                Kernel::Squared,
                ResidualKind::GoalAttraction,
            );
            check(&goal, &p3[..1]);
        }
    }

    #[test]
    fn obstacle_factor_matches_free_function() {
        let chain = Arc::new(planar_chain(&[0.5, 0.5]));
        let q = DVector::from_row_slice(&[0.3, 0.2]);
        let f = RobotObstacleFactor::new(0, chain.clone(), world(), 1.0);
        let expected = super::super::obstacle_residual(&world(), &chain.skeleton_positions(&q).unwrap());
        assert_eq!(f.residual(&[&q]), expected);
        assert_eq!(f.linearize(&[&q]).residual, expected);
    }

    #[test]
    fn point_difference_keys_skip_fixed_endpoints() {
        let f = PointDifferenceFactor::new(
            Endpoint::Fixed(Vector3::zeros()),
            Endpoint::Point { key: 4 },
            1.0,
            Kernel::Squared,
            ResidualKind::GoalAttraction,
        );
        assert_eq!(f.keys(), &[4]);
        let p = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(f.residual(&[&p]), -p.clone());
        assert_eq!(f.linearize(&[&p]).jacobians[0], -DMatrix::<f64>::identity(3, 3));
    }
}
