//! Rigid-body math and signed distance fields.

mod sdf;
mod so3;

pub use sdf::{ObstacleWorld, Primitive, SdfGrid, EMPTY_WORLD_DISTANCE};
pub use so3::{desired_grasp_rotation, hat, log_so3, right_jacobian_inv, vee, Pose, Rotation};

use nalgebra::Vector3;

/// World up direction used for grasp orientation.
pub fn world_up() -> Vector3<f64> {
    Vector3::z()
}
