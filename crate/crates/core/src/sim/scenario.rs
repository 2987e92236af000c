//! Scenario description: world, robots, sensor and injected outliers.
//!
//! Scenarios are YAML documents:
//!
//! ```yaml
//! name: loop
//! seed: 7
//! world:
//!   texture: 0.15          # relief amplitude (m), 0 = featureless
//!   bump_density: 0.6      # bumps per m² of wall
//!   rib_spacing: 5.0       # 0 disables ribs
//!   corridors:
//!     - centerline: [[0, 0], [30, 0], [30, 20]]
//!       width: 4.0
//!       height: 4.0
//!       texture_seed: 3      # optional, shared seeds alias
//!       featureless: false   # optional, suppresses relief on this corridor
//!   artifacts:
//!     - { label: backpack, position: [12, 1.5, 0.3] }
//! lidar: { range_sigma: 0.02 }   # any LidarConfig field
//! robots:
//!   - id: 1
//!     waypoints: [[2, 0], [28, 0], [28, 18]]
//!     speed: 2.0           # m/s
//!     scan_rate: 10.0      # Hz
//!     calibration: { yaw_error_deg: 5.0, sigma_rotation: 0.1, sigma_translation: 1.0 }
//! outliers:
//!   - { robot: 1, from_scan: 20, to_scan: 480, translation: [4, 0.5, 0], yaw_deg: 6 }
//! ```

use super::lidar::LidarConfig;
use super::world::{WorldError, WorldModel, WorldSpec};
use crate::geometry::{Pose3, Rot3, Vec3};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    /// Error of the robot's start pose in the shared frame.
    pub yaw_error_deg: f64,
    pub offset: [f64; 3],
    /// Standard deviations of the start prior.
    pub sigma_rotation: f64,
    pub sigma_translation: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { yaw_error_deg: 0.0, offset: [0.0; 3], sigma_rotation: 0.005, sigma_translation: 0.05 }
    }
}

impl Calibration {
    pub fn error(&self) -> Pose3 {
        Pose3::new(Rot3::rz(self.yaw_error_deg.to_radians()), Vec3::from(self.offset))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub id: u16,
    pub waypoints: Vec<[f64; 2]>,
    #[serde(default = "default_speed")]
    pub speed: f64,
    #[serde(default = "default_rate")]
    pub scan_rate: f64,
    #[serde(default = "default_sensor_height")]
    pub sensor_height: f64,
    /// Half-width of the moving average applied to the path (m).
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    /// Amplitude of roll and pitch sway (degrees).
    #[serde(default = "default_sway")]
    pub sway_deg: f64,
    #[serde(default)]
    pub calibration: Calibration,
}

fn default_speed() -> f64 {
    2.0
}
fn default_rate() -> f64 {
    10.0
}
fn default_sensor_height() -> f64 {
    1.0
}
fn default_smoothing() -> f64 {
    1.5
}
fn default_sway() -> f64 {
    1.0
}

/// Frame of an injected error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ErrorFrame {
    /// Measurement = truth ∘ error.
    #[default]
    Local,
    /// Measurement = Ta⁻¹ ∘ error ∘ Tb: the second pose displaced in the world.
    World,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub robot: u16,
    pub from_scan: usize,
    pub to_scan: usize,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub frame: ErrorFrame,
}

impl OutlierSpec {
    pub fn error(&self) -> Pose3 {
        Pose3::new(Rot3::rz(self.yaw_deg.to_radians()), Vec3::from(self.translation))
    }

    /// The corrupted relative pose between two ground-truth poses.
    pub fn measurement(&self, a: &Pose3, b: &Pose3) -> Pose3 {
        match self.frame {
            ErrorFrame::Local => a.between(b).compose(&self.error()),
            ErrorFrame::World => a.inverse().compose(&self.error()).compose(b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationConfig {
    pub max_range: f64,
    pub sigma_range: f64,
    pub sigma_bearing_deg: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self { max_range: 5.0, sigma_range: 0.1, sigma_bearing_deg: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub world: WorldSpec,
    #[serde(default)]
    pub lidar: LidarConfig,
    pub robots: Vec<TrajectorySpec>,
    #[serde(default)]
    pub outliers: Vec<OutlierSpec>,
    #[serde(default)]
    pub observations: ObservationConfig,
    /// Disables range and observation noise.
    #[serde(default)]
    pub noiseless: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

impl Scenario {
    pub fn from_yaml(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_yaml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_yaml(&std::fs::read_to_string(path)?)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("scenario serializes")
    }

    pub fn world_model(&self) -> Result<WorldModel, ScenarioError> {
        Ok(WorldModel::new(self.world.clone(), self.seed)?)
    }

    /// Ground-truth poses of every scan of every robot, checked against the world.
    pub fn trajectories(&self, world: &WorldModel) -> Result<Vec<Vec<Pose3>>, ScenarioError> {
        let mut ids: Vec<u16> = self.robots.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.robots.len() || ids.contains(&0) {
            return Err(ScenarioError::InvalidSpec("robot ids must be unique and non-zero".into()));
        }
        self.robots
            .iter()
            .map(|spec| {
                let poses = trajectory(spec)?;
                for (i, p) in poses.iter().enumerate() {
                    world.check_pose(&p.translation).map_err(|e| ScenarioError::InvalidSpec(format!("robot {} scan {i}: {e}", spec.id)))?;
                }
                Ok(poses)
            })
            .collect()
    }

    pub fn validate_outliers(&self, scan_counts: &[(u16, usize)]) -> Result<(), ScenarioError> {
        for o in &self.outliers {
            let n = scan_counts
                .iter()
                .find(|(r, _)| *r == o.robot)
                .map(|(_, n)| *n)
                .ok_or_else(|| ScenarioError::InvalidSpec(format!("outlier refers to unknown robot {}", o.robot)))?;
            if o.from_scan >= o.to_scan || o.to_scan >= n {
                return Err(ScenarioError::InvalidSpec(format!("outlier scans {}→{} out of range", o.from_scan, o.to_scan)));
            }
        }
        Ok(())
    }
}

/// Samples the smoothed waypoint path at `speed / scan_rate` spacing.
pub fn trajectory(spec: &TrajectorySpec) -> Result<Vec<Pose3>, ScenarioError> {
    if spec.waypoints.len() < 2 {
        return Err(ScenarioError::InvalidSpec(format!("robot {} needs at least two waypoints", spec.id)));
    }
    if !(spec.speed > 0.0 && spec.scan_rate > 0.0 && spec.smoothing >= 0.0) {
        return Err(ScenarioError::InvalidSpec(format!("robot {}: speed, scan rate must be positive", spec.id)));
    }
    let step = spec.speed / spec.scan_rate;
    // Dense resampling of the polyline.
    let fine = step / 4.0;
    let mut dense: Vec<[f64; 2]> = vec![spec.waypoints[0]];
    for w in spec.waypoints.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let n = (len / fine).ceil().max(1.0) as usize;
        for k in 1..=n {
            let s = k as f64 / n as f64;
            dense.push([a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]);
        }
    }
    // Symmetric moving average in arc length; the window shrinks near the
    // ends so endpoints and straight runs are preserved.
    let mut arc = vec![0.0];
    for w in dense.windows(2) {
        arc.push(arc.last().unwrap() + ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt());
    }
    let length = *arc.last().unwrap();
    let smooth: Vec<[f64; 2]> = if spec.smoothing > 0.0 {
        (0..dense.len())
            .map(|i| {
                let half = spec.smoothing.min(arc[i]).min(length - arc[i]);
                let lo = arc.partition_point(|&v| v < arc[i] - half - 1e-9);
                let hi = arc.partition_point(|&v| v <= arc[i] + half + 1e-9) - 1;
                let n = (hi - lo + 1) as f64;
                let sx: f64 = dense[lo..=hi].iter().map(|p| p[0]).sum();
                let sy: f64 = dense[lo..=hi].iter().map(|p| p[1]).sum();
                [sx / n, sy / n]
            })
            .collect()
    } else {
        dense.clone()
    };
    let mut sarc = vec![0.0];
    for w in smooth.windows(2) {
        sarc.push(sarc.last().unwrap() + ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt());
    }
    let total = *sarc.last().unwrap();
    let at = |s: f64| -> [f64; 2] {
        let s = s.clamp(0.0, total);
        let k = sarc.partition_point(|&v| v < s).clamp(1, smooth.len() - 1);
        let span = sarc[k] - sarc[k - 1];
        let u = if span > 0.0 { (s - sarc[k - 1]) / span } else { 0.0 };
        [smooth[k - 1][0] + u * (smooth[k][0] - smooth[k - 1][0]), smooth[k - 1][1] + u * (smooth[k][1] - smooth[k - 1][1])]
    };
    let n = (total / step).floor() as usize + 1;
    let chord = 0.5;
    Ok((0..n)
        .map(|i| {
            let s = i as f64 * step;
            let p = at(s);
            let (a, b) = (at(s - chord), at(s + chord));
            let yaw = (b[1] - a[1]).atan2(b[0] - a[0]);
            let sway = spec.sway_deg.to_radians();
            let roll = sway * (0.37 * s).sin();
            let pitch = sway * (0.23 * s + 1.0).sin();
            Pose3::new(Rot3::from_rpy(roll, pitch, yaw), Vec3::new(p[0], p[1], spec.sensor_height))
        })
        .collect())
}
