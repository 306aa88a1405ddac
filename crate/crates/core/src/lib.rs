//! Visual tracking control for a redundant 7-DoF arm with an eye-in-hand
//! camera: each tick an optimizer picks a bounded camera pose change that
//! keeps the target centered, the sight cone and the camera clear of
//! obstacles, and the camera inside well-reachable space; a real-time IK
//! solver then turns the pose into joint angles.

pub mod config;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod ik;
pub mod kinematics;
pub mod optim;
pub mod planner;
pub mod reachability;
pub mod report;
pub mod sim;
pub mod timing;
pub mod world;

pub use error::{Error, Result};
