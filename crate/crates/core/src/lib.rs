//! Collaborative model-predictive control for human-robot handover.
//!
//! The robot arm and a predicted external agent (a floating hand sphere) are
//! optimized jointly under one shared cost. Each control cycle re-solves a
//! fixed-horizon problem, executes the first knot, and re-anchors both agents
//! to the newest observation.

pub mod collab;
pub mod costs;
pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod mpc;
pub mod sim;
pub mod solver;
pub mod trajectory;

pub use error::{Error, Result};
