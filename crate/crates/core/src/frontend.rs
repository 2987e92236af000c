//! Per-robot lidar front-end: two-stage scan matching, key-scan creation and
//! intra-robot loop-closure candidates.

use crate::geometry::{geodesic_distances, Pose3};
use crate::pointcloud::{PointCloud, DEFAULT_VOXEL_LEAF};
use crate::posegraph::NodeId;
use crate::registration::{align, GicpParams, PreparedCloud, RegistrationError, RegistrationResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub voxel_leaf: f64,
    pub submap_window: usize,
    pub submap_leaf: f64,
    pub key_translation: f64,
    pub key_rotation: f64,
    pub scan_matching: GicpParams,
    pub loop_radius: f64,
    pub min_separation: u32,
    pub loop_fitness: f64,
    /// Registrations attempted per new key, nearest estimated keys first.
    pub max_loop_attempts: usize,
    /// Largest rotation (rad) a loop-closure registration may apply on top of
    /// the rotation taken from the estimates.
    pub loop_max_rotation_change: f64,
    pub loop_matching: GicpParams,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            voxel_leaf: DEFAULT_VOXEL_LEAF,
            submap_window: 20,
            submap_leaf: DEFAULT_VOXEL_LEAF,
            key_translation: 1.0,
            key_rotation: 30f64.to_radians(),
            scan_matching: GicpParams::default(),
            loop_radius: 10.0,
            min_separation: 10,
            loop_fitness: 5.0,
            max_loop_attempts: 5,
            loop_max_rotation_change: 15f64.to_radians(),
            loop_matching: GicpParams::loop_closure(),
        }
    }
}

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("invalid scan: {0}")]
    InvalidScan(String),
}

/// A stored scan anchoring a pose-graph node.
#[derive(Clone, Debug)]
pub struct KeyScan {
    pub id: NodeId,
    /// Front-end estimate when the key was created.
    pub pose: Pose3,
    /// Downsampled cloud in the sensor frame, prepared for registration.
    pub cloud: Arc<PreparedCloud>,
    pub timestamp: f64,
    pub scan_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdometryEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub measurement: Pose3,
    /// Some scan match since the previous key was low confidence.
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct OdometryUpdate {
    pub scan_index: usize,
    /// Scan-to-submap refined pose.
    pub pose: Pose3,
    /// Pose from chaining scan-to-scan results only.
    pub scan_to_scan_pose: Pose3,
    /// Registration reported degeneracy or failed; the pose is less reliable.
    pub low_confidence: bool,
    pub key: Option<(KeyScan, Option<OdometryEdge>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopClosureCandidate {
    pub from: NodeId,
    pub to: NodeId,
    /// Pose of `to` in the frame of `from`.
    pub relative: Pose3,
    pub fitness: f64,
}

/// Key-scan trigger: translation or rotation beyond the thresholds.
pub fn should_create_key(last: &Pose3, current: &Pose3, cfg: &FrontendConfig) -> bool {
    let (rot, trans) = geodesic_distances(last, current);
    trans > cfg.key_translation || rot > cfg.key_rotation
}

pub struct Frontend {
    robot: u16,
    cfg: FrontendConfig,
    pose: Pose3,
    scan_to_scan_pose: Pose3,
    previous: Option<PreparedCloud>,
    keys: Vec<KeyScan>,
    window: VecDeque<usize>,
    submap: Option<PreparedCloud>,
    scans: usize,
    degraded_since_key: bool,
}

impl Frontend {
    pub fn new(robot: u16, cfg: FrontendConfig, start: Pose3) -> Self {
        Self {
            robot,
            cfg,
            pose: start,
            scan_to_scan_pose: start,
            previous: None,
            keys: Vec::new(),
            window: VecDeque::new(),
            submap: None,
            scans: 0,
            degraded_since_key: false,
        }
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn pose(&self) -> Pose3 {
        self.pose
    }

    pub fn keys(&self) -> &[KeyScan] {
        &self.keys
    }

    fn rebuild_submap(&mut self) {
        let mut merged = PointCloud::default();
        for &k in &self.window {
            let key = &self.keys[k];
            merged.extend(&key.cloud.cloud().transformed(&key.pose));
        }
        let merged = merged.voxel_downsample(self.cfg.submap_leaf).unwrap_or(merged);
        self.submap = Some(PreparedCloud::new(merged));
    }

    fn push_key(&mut self, cloud: PreparedCloud, timestamp: f64) -> (KeyScan, Option<OdometryEdge>) {
        let id = NodeId::robot(self.robot, self.keys.len() as u32);
        let edge = self.keys.last().map(|last| OdometryEdge { from: last.id, to: id, measurement: last.pose.between(&self.pose), degenerate: self.degraded_since_key });
        self.degraded_since_key = false;
        let key = KeyScan { id, pose: self.pose, cloud: Arc::new(cloud), timestamp, scan_index: self.scans - 1 };
        self.keys.push(key.clone());
        self.window.push_back(self.keys.len() - 1);
        while self.window.len() > self.cfg.submap_window {
            self.window.pop_front();
        }
        self.rebuild_submap();
        (key, edge)
    }

    /// Consumes the next raw scan (sensor frame).
    pub fn process_scan(&mut self, raw: &PointCloud, timestamp: f64) -> Result<OdometryUpdate, FrontendError> {
        let cloud = raw.voxel_downsample(self.cfg.voxel_leaf).map_err(|e| FrontendError::InvalidScan(e.to_string()))?;
        let prepared = PreparedCloud::new(cloud);
        self.scans += 1;
        let scan_index = self.scans - 1;
        let Some(previous) = self.previous.take() else {
            self.previous = Some(prepared.clone());
            let key = self.push_key(prepared, timestamp);
            return Ok(OdometryUpdate { scan_index, pose: self.pose, scan_to_scan_pose: self.scan_to_scan_pose, low_confidence: false, key: Some(key) });
        };
        let mut low_confidence = false;
        let delta = match align(&prepared, &previous, &Pose3::identity(), &self.cfg.scan_matching) {
            Ok(r) => r.transform,
            Err(RegistrationError::DegenerateProblem { result, .. }) => {
                low_confidence = true;
                result.transform
            }
            Err(RegistrationError::InsufficientPoints { .. }) => {
                low_confidence = true;
                Pose3::identity()
            }
        };
        self.scan_to_scan_pose = self.scan_to_scan_pose.compose(&delta);
        let predicted = self.pose.compose(&delta);
        let submap = self.submap.as_ref().expect("submap exists after the first scan");
        self.pose = match align(&prepared, submap, &predicted, &self.cfg.scan_matching) {
            Ok(RegistrationResult { transform, .. }) => transform,
            Err(_) => {
                low_confidence = true;
                predicted
            }
        };
        self.previous = Some(prepared.clone());
        self.degraded_since_key |= low_confidence;
        let last = self.keys.last().expect("first scan creates a key");
        let key = should_create_key(&last.pose, &self.pose, &self.cfg).then(|| self.push_key(prepared, timestamp));
        Ok(OdometryUpdate { scan_index, pose: self.pose, scan_to_scan_pose: self.scan_to_scan_pose, low_confidence, key })
    }
}

/// Registers `new` against earlier keys near its estimated position.
/// `estimate` gives the current (optimized when available) pose of a key.
pub fn detect_loop_closures(new: &KeyScan, history: &[KeyScan], estimate: impl Fn(&NodeId) -> Option<Pose3>, cfg: &FrontendConfig) -> Vec<LoopClosureCandidate> {
    let Some(new_pose) = estimate(&new.id) else {
        return Vec::new();
    };
    let mut eligible: Vec<(f64, &KeyScan, Pose3)> = history
        .iter()
        .filter(|k| k.id.namespace == new.id.namespace && new.id.index.abs_diff(k.id.index) > cfg.min_separation)
        .filter_map(|k| {
            let p = estimate(&k.id)?;
            let d = (p.translation - new_pose.translation).norm();
            (d <= cfg.loop_radius).then_some((d, k, p))
        })
        .collect();
    eligible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    eligible.truncate(cfg.max_loop_attempts);
    eligible
        .par_iter()
        .filter_map(|(_, old, old_pose)| {
            // Rotation from the estimates, zero translation.
            let init = Pose3::from_rotation(old_pose.rotation.inverse() * new_pose.rotation);
            let r = align(&new.cloud, &old.cloud, &init, &cfg.loop_matching).ok()?;
            let turned = init.rotation.inverse() * r.transform.rotation;
            (r.converged && r.fitness <= cfg.loop_fitness && turned.angle() <= cfg.loop_max_rotation_change).then_some(LoopClosureCandidate { from: old.id, to: new.id, relative: r.transform, fitness: r.fitness })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rot3, Vec3};

    #[test]
    fn key_thresholds() {
        let cfg = FrontendConfig::default();
        let o = Pose3::identity();
        assert!(!should_create_key(&o, &Pose3::new(Rot3::rz(10f64.to_radians()), Vec3::new(0.9, 0.0, 0.0)), &cfg));
        assert!(should_create_key(&o, &Pose3::from_translation(Vec3::new(1.0 + 1e-9, 0.0, 0.0)), &cfg));
        assert!(!should_create_key(&o, &Pose3::from_translation(Vec3::new(1.0, 0.0, 0.0)), &cfg));
        assert!(should_create_key(&o, &Pose3::from_rotation(Rot3::rz(31f64.to_radians())), &cfg));
    }

    #[test]
    fn first_scan_is_a_key_at_the_start_pose() {
        let pts: Vec<Vec3> = (0..400).map(|i| Vec3::new((i % 20) as f64 * 0.3, (i / 20) as f64 * 0.3, ((i * 7) % 5) as f64 * 0.3)).collect();
        let start = Pose3::from_xyz_yaw(1.0, 2.0, 0.0, 0.5);
        let mut fe = Frontend::new(3, FrontendConfig::default(), start);
        let u = fe.process_scan(&PointCloud::new(pts), 0.0).unwrap();
        let (key, edge) = u.key.unwrap();
        assert_eq!(key.id, NodeId::robot(3, 0));
        assert!(edge.is_none());
        assert_eq!(u.pose, start);
    }

    #[test]
    fn empty_scan_is_rejected() {
        let mut fe = Frontend::new(1, FrontendConfig::default(), Pose3::identity());
        assert!(fe.process_scan(&PointCloud::default(), 0.0).is_err());
    }
}
