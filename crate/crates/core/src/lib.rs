//! Lidar SLAM for multi-robot subterranean mapping.
//!
//! The crate is organized along the data flow of the system: a per-robot
//! [`frontend`] turns raw scans into odometry and loop-closure candidates using
//! [`registration`] (GICP); the [`icm`] module rejects inconsistent loop
//! closures; [`optimizer`] runs Gauss-Newton over the [`posegraph`]; and the
//! [`basestation`] merges robot graphs into one map. [`sim`] provides a
//! deterministic tunnel world with ground truth and [`metrics`] scores results.

pub mod basestation;
pub mod frontend;
pub mod geometry;
pub mod icm;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod pointcloud;
pub mod posegraph;
pub mod registration;
pub mod sim;

pub use geometry::{geodesic_distances, Mat3, Mat6, Pose3, Rot3, Twist6, Vec3, Vec6};
