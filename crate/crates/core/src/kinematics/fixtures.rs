use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use nalgebra::Vector3;

use super::{JointLimit, JointType, Link, SerialChain, SkeletonSphere};
use crate::geometry::{Pose, Rotation};

/// Planar chain rotating about world z with the given link lengths.
/// Two skeleton spheres per link (mid-point and tip).
pub fn planar_chain(lengths: &[f64]) -> SerialChain {
    let n = lengths.len();
    let mut links = Vec::with_capacity(n);
    for i in 0..n {
        let offset = if i == 0 { 0.0 } else { lengths[i - 1] };
        links.push(Link {
            origin: Pose::from_translation(Vector3::new(offset, 0.0, 0.0)),
            axis: Vector3::z(),
            joint: JointType::Revolute,
        });
    }
    let mut skeleton = Vec::new();
    for (i, len) in lengths.iter().enumerate() {
        let r = (0.25 * len).max(0.02);
        skeleton.push(SkeletonSphere { link: i + 1, offset: Vector3::new(0.5 * len, 0.0, 0.0), radius: r });
        skeleton.push(SkeletonSphere { link: i + 1, offset: Vector3::new(*len, 0.0, 0.0), radius: r });
    }
    SerialChain {
        name: format!("planar{n}"),
        base: Pose::identity(),
        links,
        tool: Pose::from_translation(Vector3::new(lengths.last().copied().unwrap_or(0.0), 0.0, 0.0)),
        joint_limits: vec![JointLimit { min: -3.0, max: 3.0 }; n],
        velocity_limits: vec![2.0; n],
        skeleton,
    }
}

fn mdh(alpha: f64, a: f64, d: f64) -> Pose {
    // Modified DH: RotX(alpha) * TransX(a) * TransZ(d); the joint then rotates about z.
    let rx = Rotation::about_axis(&Vector3::x(), alpha);
    Pose::new(rx, Vector3::new(a, 0.0, 0.0) + rx * Vector3::new(0.0, 0.0, d))
}

/// 7-DOF arm with Franka Emika Panda geometry and published joint limits.
pub fn franka_like() -> SerialChain {
    let params = [
        (0.0, 0.0, 0.333),
        (-FRAC_PI_2, 0.0, 0.0),
        (FRAC_PI_2, 0.0, 0.316),
        (FRAC_PI_2, 0.0825, 0.0),
        (-FRAC_PI_2, -0.0825, 0.384),
        (FRAC_PI_2, 0.0, 0.0),
        (FRAC_PI_2, 0.088, 0.0),
    ];
    let links = params
        .iter()
        .map(|&(alpha, a, d)| Link { origin: mdh(alpha, a, d), axis: Vector3::z(), joint: JointType::Revolute })
        .collect();
    let limits = [
        (-2.8973, 2.8973),
        (-1.7628, 1.7628),
        (-2.8973, 2.8973),
        (-3.0718, -0.0698),
        (-2.8973, 2.8973),
        (-0.0175, 3.7525),
        (-2.8973, 2.8973),
    ];
    let velocity_limits = vec![2.175, 2.175, 2.175, 2.175, 2.61, 2.61, 2.61];
    // Flange (0.107 m) plus hand with the tool centre 0.1034 m further out.
    let tool = Pose::new(
        Rotation::about_axis(&Vector3::z(), -FRAC_PI_4),
        Vector3::new(0.0, 0.0, 0.107 + 0.1034),
    );
    let sphere = |link: usize, x: f64, y: f64, z: f64, radius: f64| SkeletonSphere {
        link,
        offset: Vector3::new(x, y, z),
        radius,
    };
    let skeleton = vec![
        sphere(1, 0.0, 0.0, -0.25, 0.08),
        sphere(1, 0.0, 0.0, -0.12, 0.08),
        sphere(2, 0.0, -0.08, 0.0, 0.08),
        sphere(2, 0.0, -0.20, 0.0, 0.08),
        sphere(3, 0.0, 0.0, 0.0, 0.07),
        sphere(3, 0.0825, 0.0, 0.0, 0.07),
        sphere(4, -0.0275, 0.128, 0.0, 0.065),
        sphere(4, -0.055, 0.256, 0.0, 0.065),
        sphere(5, 0.0, 0.0, -0.22, 0.06),
        sphere(5, 0.0, 0.0, -0.10, 0.06),
        sphere(5, 0.0, 0.0, 0.0, 0.06),
        sphere(6, 0.0, 0.0, 0.0, 0.06),
        sphere(6, 0.088, 0.0, 0.0, 0.06),
        sphere(7, 0.0, 0.0, 0.07, 0.06),
        sphere(7, 0.0, 0.0, 0.14, 0.05),
    ];
    SerialChain {
        name: "franka_like".into(),
        base: Pose::identity(),
        links,
        tool,
        joint_limits: limits.iter().map(|&(min, max)| JointLimit { min, max }).collect(),
        velocity_limits,
        skeleton,
    }
}

/// Franka "ready" configuration: elbow up, gripper pointing down.
pub fn franka_ready() -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_row_slice(&[0.0, -FRAC_PI_4, 0.0, -3.0 * FRAC_PI_4, 0.0, FRAC_PI_2, FRAC_PI_4])
}
