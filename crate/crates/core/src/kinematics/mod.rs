//! Serial-chain kinematics: forward kinematics, sphere skeletons and
//! geometric Jacobians.

mod fixtures;

pub use fixtures::{franka_like, franka_ready, planar_chain};

use nalgebra::{DVector, Matrix3xX, Matrix6xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{Pose, Rotation};

/// Joint angles in radians.
pub type JointConfig = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    #[default]
    Revolute,
}

/// One revolute joint: a fixed transform from the parent frame followed by a
/// rotation about `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub origin: Pose,
    pub axis: Vector3<f64>,
    pub joint: JointType,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub min: f64,
    pub max: f64,
}

/// Collision sphere attached to a link frame. Link 0 is the fixed base;
/// link `k` is the frame after joint `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSphere {
    pub link: usize,
    pub offset: Vector3<f64>,
    pub radius: f64,
}

/// Where a task-space Jacobian is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskPoint {
    Skeleton(usize),
    EndEffector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerialChain {
    pub name: String,
    pub base: Pose,
    pub links: Vec<Link>,
    pub tool: Pose,
    pub joint_limits: Vec<JointLimit>,
    pub velocity_limits: Vec<f64>,
    pub skeleton: Vec<SkeletonSphere>,
}

/// Frames of a chain evaluated at one configuration.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// `frames[0]` is the base, `frames[k]` the frame after joint `k`.
    pub frames: Vec<Pose>,
    pub ee: Pose,
    axes: Vec<Vector3<f64>>,
}

impl ChainState {
    /// Position Jacobian of a world point rigidly attached to `link`.
    pub fn point_jacobian(&self, link: usize, point: &Vector3<f64>) -> Matrix3xX<f64> {
        let n = self.axes.len();
        let mut j = Matrix3xX::zeros(n);
        for i in 0..link.min(n) {
            let origin = self.frames[i + 1].translation;
            let col = self.axes[i].cross(&(point - origin));
            j.set_column(i, &col);
        }
        j
    }

    /// World-frame angular Jacobian of `link`.
    pub fn angular_jacobian(&self, link: usize) -> Matrix3xX<f64> {
        let n = self.axes.len();
        let mut j = Matrix3xX::zeros(n);
        for i in 0..link.min(n) {
            j.set_column(i, &self.axes[i]);
        }
        j
    }

    /// Geometric end-effector Jacobian: rows 0..3 linear, 3..6 angular (world frame).
    pub fn ee_jacobian(&self) -> Matrix6xX<f64> {
        let n = self.axes.len();
        let lin = self.point_jacobian(n, &self.ee.translation);
        let ang = self.angular_jacobian(n);
        let mut j = Matrix6xX::zeros(n);
        j.fixed_rows_mut::<3>(0).copy_from(&lin);
        j.fixed_rows_mut::<3>(3).copy_from(&ang);
        j
    }

    pub fn ee_position(&self) -> Vector3<f64> {
        self.ee.translation
    }
}

impl SerialChain {
    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        if n == 0 {
            return Err(Error::Config("chain has no joints".into()));
        }
        check_dim(n, self.joint_limits.len())?;
        check_dim(n, self.velocity_limits.len())?;
        for (i, l) in self.joint_limits.iter().enumerate() {
            if !(l.min < l.max) {
                return Err(Error::Config(format!("joint {i}: min {} >= max {}", l.min, l.max)));
            }
        }
        if self.velocity_limits.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("velocity limits must be positive".into()));
        }
        if self.skeleton.is_empty() {
            return Err(Error::Config("skeleton must contain at least one sphere".into()));
        }
        for s in &self.skeleton {
            if !(s.radius > 0.0) || s.link > n {
                return Err(Error::Config(format!("bad skeleton sphere {s:?}")));
            }
        }
        for l in &self.links {
            if (l.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("joint axes must be unit vectors".into()));
            }
        }
        Ok(())
    }

    pub fn state(&self, q: &JointConfig) -> Result<ChainState> {
        check_dim(self.dof(), q.len())?;
        let mut frames = Vec::with_capacity(self.dof() + 1);
        let mut axes = Vec::with_capacity(self.dof());
        let mut current = self.base;
        frames.push(current);
        for (link, angle) in self.links.iter().zip(q.iter()) {
            let pre = current * link.origin;
            axes.push(pre.rotation * link.axis);
            current = pre * Pose::new(Rotation::about_axis(&link.axis, *angle), Vector3::zeros());
            frames.push(current);
        }
        let ee = current * self.tool;
        Ok(ChainState { frames, ee, axes })
    }

    pub fn forward_kinematics(&self, q: &JointConfig) -> Result<Pose> {
        Ok(self.state(q)?.ee)
    }

    pub fn skeleton_positions(&self, q: &JointConfig) -> Result<Vec<(Vector3<f64>, f64)>> {
        let st = self.state(q)?;
        Ok(self.skeleton_from_state(&st))
    }

    pub fn skeleton_from_state(&self, st: &ChainState) -> Vec<(Vector3<f64>, f64)> {
        self.skeleton
            .iter()
            .map(|s| (st.frames[s.link].transform_point(&s.offset), s.radius))
            .collect()
    }

    /// Position (3×n) or pose (6×n) Jacobian of a task point.
    pub fn task_jacobian(&self, q: &JointConfig, point: TaskPoint) -> Result<nalgebra::DMatrix<f64>> {
        let st = self.state(q)?;
        match point {
            TaskPoint::EndEffector => {
                let j = st.ee_jacobian();
                Ok(nalgebra::DMatrix::from_iterator(6, self.dof(), j.iter().copied()))
            }
            TaskPoint::Skeleton(i) => {
                let s = self
                    .skeleton
                    .get(i)
                    .ok_or_else(|| Error::Invalid(format!("skeleton index {i} out of range")))?;
                let p = st.frames[s.link].transform_point(&s.offset);
                let j = st.point_jacobian(s.link, &p);
                Ok(nalgebra::DMatrix::from_iterator(3, self.dof(), j.iter().copied()))
            }
        }
    }

    pub fn midrange(&self) -> JointConfig {
        DVector::from_iterator(self.dof(), self.joint_limits.iter().map(|l| 0.5 * (l.min + l.max)))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ChainSpec = serde_json::from_str(s)?;
        spec.into_chain()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ChainSpec::from_chain(self)).expect("chain serializes")
    }
}

/// On-disk chain description (meters, radians; rotations as roll-pitch-yaw).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSpec {
    pub name: String,
    #[serde(default)]
    pub base: OriginSpec,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub tool: OriginSpec,
    pub skeleton: Vec<SkeletonSphere>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OriginSpec {
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl OriginSpec {
    fn pose(&self) -> Pose {
        Pose::new(
            Rotation::from_rpy(self.rpy[0], self.rpy[1], self.rpy[2]),
            Vector3::from(self.xyz),
        )
    }

    fn from_pose(p: &Pose) -> Self {
        let m = p.rotation.matrix();
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        Self { xyz: p.translation.into(), rpy: [roll, pitch, yaw] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkSpec {
    pub origin: OriginSpec,
    pub axis: [f64; 3],
    #[serde(default)]
    pub joint: JointType,
    pub limits: JointLimit,
    pub max_velocity: f64,
}

impl ChainSpec {
    pub fn into_chain(self) -> Result<SerialChain> {
        let chain = SerialChain {
            name: self.name,
            base: self.base.pose(),
            links: self
                .links
                .iter()
                .map(|l| Link { origin: l.origin.pose(), axis: Vector3::from(l.axis), joint: l.joint })
                .collect(),
            tool: self.tool.pose(),
            joint_limits: self.links.iter().map(|l| l.limits).collect(),
            velocity_limits: self.links.iter().map(|l| l.max_velocity).collect(),
            skeleton: self.skeleton,
        };
        chain.validate()?;
        Ok(chain)
    }

    pub fn from_chain(c: &SerialChain) -> Self {
        Self {
            name: c.name.clone(),
            base: OriginSpec::from_pose(&c.base),
            links: c
                .links
                .iter()
                .zip(&c.joint_limits)
                .zip(&c.velocity_limits)
                .map(|((l, lim), v)| LinkSpec {
                    origin: OriginSpec::from_pose(&l.origin),
                    axis: l.axis.into(),
                    joint: l.joint,
                    limits: *lim,
                    max_velocity: *v,
                })
                .collect(),
            tool: OriginSpec::from_pose(&c.tool),
            skeleton: c.skeleton.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn two_link() -> SerialChain {
        planar_chain(&[1.0, 1.0])
    }

    #[test]
    fn planar_fk_cases() {
        let c = two_link();
        let t = |q: [f64; 2]| c.forward_kinematics(&DVector::from_row_slice(&q)).unwrap().translation;
        assert_relative_eq!(t([0.0, 0.0]), Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(t([FRAC_PI_2, 0.0]), Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(t([FRAC_PI_2, -FRAC_PI_2]), Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn fk_rejects_wrong_dimension() {
        let c = two_link();
        assert_eq!(
            c.forward_kinematics(&DVector::zeros(3)).unwrap_err(),
            Error::DimensionMismatch { expected: 2, got: 3 }
        );
    }

    #[test]
    fn base_sphere_is_fixed_and_tip_sphere_tracks_fk() {
        let mut c = two_link();
        c.skeleton = vec![
            SkeletonSphere { link: 0, offset: Vector3::zeros(), radius: 0.1 },
            SkeletonSphere { link: 2, offset: Vector3::new(1.0, 0.0, 0.0), radius: 0.1 },
        ];
        let s = c.skeleton_positions(&DVector::from_row_slice(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(s[1].0, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        let s = c.skeleton_positions(&DVector::from_row_slice(&[1.3, -0.4])).unwrap();
        assert_eq!(s[0].0, Vector3::zeros());
    }

    #[test]
    fn one_link_lever_arm() {
        let c = planar_chain(&[1.0]);
        let j = c.task_jacobian(&DVector::zeros(1), TaskPoint::EndEffector).unwrap();
        assert_relative_eq!(j[(0, 0)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(j[(1, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(j[(2, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_length_link_has_zero_position_column() {
        let c = planar_chain(&[0.0]);
        let j = c.task_jacobian(&DVector::from_row_slice(&[0.7]), TaskPoint::EndEffector).unwrap();
        assert!(j.rows(0, 3).norm() < 1e-15);
    }

    /// Recompose every link transform from scratch, independent of `state`.
    fn independent_link_pose(c: &SerialChain, q: &JointConfig, link: usize) -> Pose {
        let mut p = c.base;
        for k in 0..link {
            let l = &c.links[k];
            let r = Rotation::about_axis(&l.axis, q[k]);
            p = p * l.origin * Pose::new(r, Vector3::zeros());
        }
        p
    }

    #[test]
    fn skeleton_matches_independent_composition() {
        let c = franka_like();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q = random_config(&c, &mut rng);
            let centers = c.skeleton_positions(&q).unwrap();
            for (s, (center, r)) in c.skeleton.iter().zip(&centers) {
                let p = independent_link_pose(&c, &q, s.link).transform_point(&s.offset);
                assert!((p - center).norm() < 1e-12);
                assert_eq!(*r, s.radius);
            }
        }
    }

    pub(crate) fn random_config(c: &SerialChain, rng: &mut ChaCha8Rng) -> JointConfig {
        DVector::from_iterator(c.dof(), c.joint_limits.iter().map(|l| rng.gen_range(l.min..l.max)))
    }

    fn check_jacobians(c: &SerialChain, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-6;
        for _ in 0..100 {
            let q = random_config(c, &mut rng);
            let jee = c.task_jacobian(&q, TaskPoint::EndEffector).unwrap();
            let base = c.forward_kinematics(&q).unwrap();
            for k in 0..c.dof() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let pp = c.forward_kinematics(&qp).unwrap();
                let pm = c.forward_kinematics(&qm).unwrap();
                let dt = (pp.translation - pm.translation) / (2.0 * h);
                // World-frame angular velocity from the rotation increment.
                let dr = ((pp.rotation * base.rotation.transpose()).log()
                    - (pm.rotation * base.rotation.transpose()).log())
                    / (2.0 * h);
                let col = jee.column(k);
                let lin = Vector3::new(col[0], col[1], col[2]);
                let ang = Vector3::new(col[3], col[4], col[5]);
                assert!((lin - dt).norm() <= 1e-6 * dt.norm().max(1.0));
                assert!((ang - dr).norm() <= 1e-6 * dr.norm().max(1.0), "k={k} ang={ang:?} dr={dr:?}");
            }
            for (i, _) in c.skeleton.iter().enumerate() {
                let j = c.task_jacobian(&q, TaskPoint::Skeleton(i)).unwrap();
                for k in 0..c.dof() {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[k] += h;
                    qm[k] -= h;
                    let fd = (c.skeleton_positions(&qp).unwrap()[i].0 - c.skeleton_positions(&qm).unwrap()[i].0)
                        / (2.0 * h);
                    let col = Vector3::new(j[(0, k)], j[(1, k)], j[(2, k)]);
                    assert!((col - fd).norm() <= 1e-6 * fd.norm().max(1.0));
                }
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences_planar() {
        check_jacobians(&planar_chain(&[0.5, 0.4, 0.3]), 1);
    }

    #[test]
    fn jacobians_match_finite_differences_franka() {
        check_jacobians(&franka_like(), 7);
    }

    #[test]
    fn fk_is_reproducible() {
        let c = franka_like();
        let q = c.midrange();
        assert_eq!(c.forward_kinematics(&q).unwrap(), c.forward_kinematics(&q).unwrap());
    }

    #[test]
    fn chain_json_round_trip() {
        let c = franka_like();
        let back = SerialChain::from_json(&c.to_json()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let q = random_config(&c, &mut rng);
            let a = c.forward_kinematics(&q).unwrap();
            let b = back.forward_kinematics(&q).unwrap();
            assert!((a.translation - b.translation).norm() < 1e-12);
            assert!((a.rotation.matrix() - b.rotation.matrix()).abs().max() < 1e-12);
        }
        assert_eq!(back.joint_limits, c.joint_limits);
    }

    #[test]
    fn invalid_chains_rejected() {
        let mut c = two_link();
        c.joint_limits[0] = JointLimit { min: 1.0, max: -1.0 };
        assert!(c.validate().is_err());
        let mut c = two_link();
        c.skeleton.clear();
        assert!(c.validate().is_err());
    }
}
