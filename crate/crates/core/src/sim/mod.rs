//! Deterministic tunnel-world simulator with ground truth.

pub mod dataset;
pub mod graph_scenario;
pub mod lidar;
pub mod scenario;
pub mod world;

pub use dataset::{ArtifactObservation, Dataset, DatasetError, RobotTrack};
pub use lidar::{simulate_scan, LidarConfig};
pub use scenario::{Scenario, ScenarioError, TrajectorySpec};
pub use world::{Artifact, WorldModel, WorldSpec};
