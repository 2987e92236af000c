//! Scan streams with ground truth, generated in memory or stored on disk.
//!
//! Directory layout written by [`Dataset::write`]:
//!
//! ```text
//! dataset.json                 name and robot ids
//! scenario.yaml                generating scenario (optional)
//! artifacts.jsonl              {"id", "label", "position": [x, y, z]}
//! outliers.jsonl               injected outlier closures with labels
//! robot_<id>/meta.json         start prior and its standard deviations
//! robot_<id>/scans/NNNNNN.ply  sensor-frame scans
//! robot_<id>/scans.jsonl       {"index", "timestamp"}
//! robot_<id>/ground_truth.jsonl {"index", "timestamp", "pose": [tx ty tz qx qy qz qw]}
//! robot_<id>/observations.jsonl {"scan", "artifact", "label", "measurement": [x, y, z]}
//! ```
//!
//! A directory holding only `*.ply` files (plus an optional `scans.jsonl`)
//! loads as a single robot with id 1 and no ground truth.

use super::lidar::{simulate_scan, stream_seed, LidarConfig};
use super::scenario::{ObservationConfig, OutlierSpec, Scenario, ScenarioError};
use super::world::{Artifact, WorldModel};
use crate::geometry::{Pose3, Vec3};
use crate::pointcloud::{ply, PointCloud};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("unknown robot {0}")]
    UnknownRobot(u16),
    #[error("scan {index} of robot {robot} does not exist")]
    UnknownScan { robot: u16, index: usize },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactObservation {
    pub scan: usize,
    pub artifact: u32,
    pub label: String,
    pub measurement: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotTrack {
    pub id: u16,
    pub timestamps: Vec<f64>,
    pub ground_truth: Option<Vec<Pose3>>,
    pub observations: Vec<ArtifactObservation>,
    /// Start pose in the shared frame as the robot believes it.
    pub start_prior: Pose3,
    pub prior_sigma_rotation: f64,
    pub prior_sigma_translation: f64,
}

impl RobotTrack {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Clone, Debug)]
enum ScanStore {
    Simulated { world: Arc<WorldModel>, lidar: LidarConfig, seed: u64, noiseless: bool },
    Directory { files: Vec<(u16, Vec<PathBuf>)> },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub robots: Vec<RobotTrack>,
    pub artifacts: Vec<Artifact>,
    pub outliers: Vec<OutlierSpec>,
    pub scenario: Option<Scenario>,
    world: Option<Arc<WorldModel>>,
    store: ScanStore,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    robots: Vec<u16>,
}

#[derive(Serialize, Deserialize)]
struct RobotMeta {
    id: u16,
    start_prior: [f64; 7],
    sigma_rotation: f64,
    sigma_translation: f64,
}

#[derive(Serialize, Deserialize)]
struct ScanRecord {
    index: usize,
    timestamp: f64,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    index: usize,
    timestamp: f64,
    pose: [f64; 7],
}

fn observe(world: &WorldModel, cfg: &ObservationConfig, pose: &Pose3, noise: Option<&mut ChaCha8Rng>) -> Vec<(u32, Vec3)> {
    let mut out = Vec::new();
    let mut noise = noise;
    for a in &world.artifacts {
        let delta = a.position - pose.translation;
        let dist = delta.norm();
        if dist > cfg.max_range || dist < 1e-6 {
            continue;
        }
        let dir = delta / dist;
        if world.cast(&pose.translation, &dir, dist).is_some_and(|hit| hit < dist - 0.05) {
            continue;
        }
        let local = pose.inverse_transform_point(&a.position);
        let (mut r, mut az, mut el) = (local.norm(), local.y.atan2(local.x), (local.z / local.norm()).asin());
        if let Some(rng) = noise.as_deref_mut() {
            let nr = Normal::new(0.0, cfg.sigma_range).expect("finite sigma");
            let nb = Normal::new(0.0, cfg.sigma_bearing_deg.to_radians()).expect("finite sigma");
            r += nr.sample(rng);
            az += nb.sample(rng);
            el += nb.sample(rng);
        }
        out.push((a.id, Vec3::new(r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin())));
    }
    out
}

impl Dataset {
    /// Builds the ground truth and observations of a scenario. Scans are
    /// ray-cast on demand and are bit-identical across calls.
    pub fn generate(scenario: &Scenario) -> Result<Dataset, ScenarioError> {
        let world = Arc::new(scenario.world_model()?);
        let trajectories = scenario.trajectories(&world)?;
        let counts: Vec<(u16, usize)> = scenario.robots.iter().zip(&trajectories).map(|(r, t)| (r.id, t.len())).collect();
        scenario.validate_outliers(&counts)?;
        let robots = scenario
            .robots
            .iter()
            .zip(trajectories)
            .map(|(spec, gt)| {
                let mut observations = Vec::new();
                for (i, pose) in gt.iter().enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scenario.seed, spec.id, i as u64, 1));
                    let rng = (!scenario.noiseless).then_some(&mut rng);
                    for (artifact, measurement) in observe(&world, &scenario.observations, pose, rng) {
                        let label = world.artifacts[artifact as usize].label.clone();
                        observations.push(ArtifactObservation { scan: i, artifact, label, measurement });
                    }
                }
                RobotTrack {
                    id: spec.id,
                    timestamps: (0..gt.len()).map(|i| i as f64 / spec.scan_rate).collect(),
                    start_prior: spec.calibration.error().compose(&gt[0]),
                    prior_sigma_rotation: spec.calibration.sigma_rotation,
                    prior_sigma_translation: spec.calibration.sigma_translation,
                    ground_truth: Some(gt),
                    observations,
                }
            })
            .collect();
        Ok(Dataset {
            name: scenario.name.clone(),
            robots,
            artifacts: world.artifacts.clone(),
            outliers: scenario.outliers.clone(),
            scenario: Some(scenario.clone()),
            world: Some(world.clone()),
            store: ScanStore::Simulated { world, lidar: scenario.lidar.clone(), seed: scenario.seed, noiseless: scenario.noiseless },
        })
    }

    pub fn world(&self) -> Option<&WorldModel> {
        self.world.as_deref()
    }

    pub fn robot(&self, id: u16) -> Option<&RobotTrack> {
        self.robots.iter().find(|r| r.id == id)
    }

    pub fn scan(&self, robot: u16, index: usize) -> Result<PointCloud, DatasetError> {
        let track = self.robot(robot).ok_or(DatasetError::UnknownRobot(robot))?;
        if index >= track.len() {
            return Err(DatasetError::UnknownScan { robot, index });
        }
        match &self.store {
            ScanStore::Simulated { world, lidar, seed, noiseless } => {
                let pose = &track.ground_truth.as_ref().expect("simulated tracks have ground truth")[index];
                let noise = (!noiseless).then(|| stream_seed(*seed, robot, index as u64, 0));
                simulate_scan(world, lidar, pose, noise).map_err(|e| DatasetError::Scenario(e.into()))
            }
            ScanStore::Directory { files } => {
                let path = &files.iter().find(|(r, _)| *r == robot).expect("robot has files").1[index];
                ply::read_ply_file(path).map_err(|e| DatasetError::Format { path: path.clone(), message: e.to_string() })
            }
        }
    }

    /// Noiseless scan at a ground-truth pose, for surface oracles.
    pub fn noiseless_scan(&self, pose: &Pose3) -> Option<PointCloud> {
        let world = self.world.as_ref()?;
        let lidar = self.scenario.as_ref().map(|s| s.lidar.clone()).unwrap_or_default();
        simulate_scan(world, &lidar, pose, None).ok()
    }

    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = DatasetMeta { name: self.name.clone(), robots: self.robots.iter().map(|r| r.id).collect() };
        write_file(&dir.join("dataset.json"), &serde_json::to_string_pretty(&meta).expect("serializable"))?;
        if let Some(s) = &self.scenario {
            write_file(&dir.join("scenario.yaml"), &s.to_yaml())?;
        }
        write_jsonl(&dir.join("artifacts.jsonl"), &self.artifacts)?;
        write_jsonl(&dir.join("outliers.jsonl"), &self.outliers)?;
        for track in &self.robots {
            let rdir = dir.join(format!("robot_{}", track.id));
            let sdir = rdir.join("scans");
            std::fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
            let meta = RobotMeta {
                id: track.id,
                start_prior: track.start_prior.to_g2o(),
                sigma_rotation: track.prior_sigma_rotation,
                sigma_translation: track.prior_sigma_translation,
            };
            write_file(&rdir.join("meta.json"), &serde_json::to_string_pretty(&meta).expect("serializable"))?;
            let scans: Vec<ScanRecord> = track.timestamps.iter().enumerate().map(|(index, &timestamp)| ScanRecord { index, timestamp }).collect();
            write_jsonl(&rdir.join("scans.jsonl"), &scans)?;
            if let Some(gt) = &track.ground_truth {
                let recs: Vec<GroundTruthRecord> =
                    gt.iter().enumerate().map(|(index, p)| GroundTruthRecord { index, timestamp: track.timestamps[index], pose: p.to_g2o() }).collect();
                write_jsonl(&rdir.join("ground_truth.jsonl"), &recs)?;
            }
            write_jsonl(&rdir.join("observations.jsonl"), &track.observations)?;
            (0..track.len()).into_par_iter().try_for_each(|i| {
                let cloud = self.scan(track.id, i)?;
                let path = sdir.join(format!("{i:06}.ply"));
                ply::write_ply_file(&cloud, &path).map_err(io_err(&path))
            })?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
        if !dir.is_dir() {
            return Err(DatasetError::Io { path: dir.to_path_buf(), source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory") });
        }
        let meta_path = dir.join("dataset.json");
        if !meta_path.exists() {
            return Self::load_plain(dir);
        }
        let meta: DatasetMeta = read_json(&meta_path)?;
        let scenario_path = dir.join("scenario.yaml");
        let scenario = if scenario_path.exists() { Some(Scenario::load(&scenario_path)?) } else { None };
        let world = match &scenario {
            Some(s) => Some(Arc::new(s.world_model()?)),
            None => None,
        };
        let artifacts: Vec<Artifact> = read_jsonl_opt(&dir.join("artifacts.jsonl"))?;
        let outliers: Vec<OutlierSpec> = read_jsonl_opt(&dir.join("outliers.jsonl"))?;
        let mut robots = Vec::new();
        let mut files = Vec::new();
        for id in meta.robots {
            let rdir = dir.join(format!("robot_{id}"));
            let rmeta: RobotMeta = read_json(&rdir.join("meta.json"))?;
            let scans = ply_files(&rdir.join("scans"))?;
            let timestamps = timestamps(&rdir.join("scans.jsonl"), scans.len())?;
            let gt_path = rdir.join("ground_truth.jsonl");
            let ground_truth = if gt_path.exists() {
                let recs: Vec<GroundTruthRecord> = read_jsonl(&gt_path)?;
                if recs.len() != scans.len() {
                    return Err(DatasetError::Format { path: gt_path, message: format!("{} poses for {} scans", recs.len(), scans.len()) });
                }
                Some(recs.iter().map(|r| Pose3::from_g2o(&r.pose)).collect())
            } else {
                None
            };
            robots.push(RobotTrack {
                id,
                timestamps,
                ground_truth,
                observations: read_jsonl_opt(&rdir.join("observations.jsonl"))?,
                start_prior: Pose3::from_g2o(&rmeta.start_prior),
                prior_sigma_rotation: rmeta.sigma_rotation,
                prior_sigma_translation: rmeta.sigma_translation,
            });
            files.push((id, scans));
        }
        if robots.iter().all(|r| r.is_empty()) {
            return Err(DatasetError::Empty(dir.display().to_string()));
        }
        Ok(Dataset { name: meta.name, robots, artifacts, outliers, scenario, world, store: ScanStore::Directory { files } })
    }

    fn load_plain(dir: &Path) -> Result<Dataset, DatasetError> {
        let scans = ply_files(dir)?;
        if scans.is_empty() {
            return Err(DatasetError::Empty(dir.display().to_string()));
        }
        let timestamps = timestamps(&dir.join("scans.jsonl"), scans.len())?;
        let track = RobotTrack {
            id: 1,
            timestamps,
            ground_truth: None,
            observations: Vec::new(),
            start_prior: Pose3::identity(),
            prior_sigma_rotation: 0.005,
            prior_sigma_translation: 0.05,
        };
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Dataset {
            name,
            robots: vec![track],
            artifacts: Vec::new(),
            outliers: Vec::new(),
            scenario: None,
            world: None,
            store: ScanStore::Directory { files: vec![(1, scans)] },
        })
    }
}

fn ply_files(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    Ok(files)
}

fn timestamps(path: &Path, n: usize) -> Result<Vec<f64>, DatasetError> {
    if !path.exists() {
        return Ok((0..n).map(|i| i as f64 * 0.1).collect());
    }
    let recs: Vec<ScanRecord> = read_jsonl(path)?;
    if recs.len() != n {
        return Err(DatasetError::Format { path: path.to_path_buf(), message: format!("{} records for {n} scans", recs.len()) });
    }
    Ok(recs.iter().map(|r| r.timestamp).collect())
}

fn write_file(path: &Path, text: &str) -> Result<(), DatasetError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| DatasetError::Format { path: path.to_path_buf(), message: e.to_string() })?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Format { path: path.to_path_buf(), message: e.to_string() })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Format { path: path.to_path_buf(), message: format!("line {}: {e}", n + 1) })?);
    }
    Ok(out)
}

fn read_jsonl_opt<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    if path.exists() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
name: small
seed: 4
world:
  texture: 0.15
  corridors:
    - centerline: [[0, 0], [30, 0]]
  artifacts:
    - { label: backpack, position: [10, 1.2, 0.5] }
robots:
  - id: 1
    waypoints: [[2, 0], [6, 0]]
outliers:
  - { robot: 1, from_scan: 1, to_scan: 18, translation: [3, 0, 0] }
"#;

    #[test]
    fn generation_is_deterministic() {
        let s = Scenario::from_yaml(SMALL).unwrap();
        let a = Dataset::generate(&s).unwrap();
        let b = Dataset::generate(&s).unwrap();
        assert_eq!(a.robots, b.robots);
        assert_eq!(a.scan(1, 3).unwrap(), b.scan(1, 3).unwrap());
        assert_eq!(a.robots[0].len(), 21);
    }

    #[test]
    fn artifacts_are_observed_only_nearby() {
        let mut s = Scenario::from_yaml(SMALL).unwrap();
        s.robots[0].waypoints = vec![[2.0, 0.0], [20.0, 0.0]];
        s.outliers.clear();
        let d = Dataset::generate(&s).unwrap();
        let track = &d.robots[0];
        let gt = track.ground_truth.as_ref().unwrap();
        assert!(!track.observations.is_empty());
        for o in &track.observations {
            let truth = gt[o.scan].inverse_transform_point(&d.artifacts[0].position);
            assert!(truth.norm() <= 5.0);
            assert!((o.measurement - truth).norm() < 0.6);
        }
        let seen: Vec<usize> = track.observations.iter().map(|o| o.scan).collect();
        assert!(gt.iter().enumerate().filter(|(_, p)| (p.translation - d.artifacts[0].position).norm() < 4.5).all(|(i, _)| seen.contains(&i)));
    }

    #[test]
    fn bad_outlier_scans_are_invalid() {
        let mut s = Scenario::from_yaml(SMALL).unwrap();
        s.outliers[0].to_scan = 500;
        assert!(matches!(Dataset::generate(&s), Err(ScenarioError::InvalidSpec(_))));
    }

    #[test]
    fn disk_round_trip() {
        let s = Scenario::from_yaml(SMALL).unwrap();
        let d = Dataset::generate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.robots.len(), 1);
        assert_eq!(back.outliers, d.outliers);
        assert_eq!(back.artifacts, d.artifacts);
        let (a, b) = (&back.robots[0], &d.robots[0]);
        assert_eq!(a.timestamps, b.timestamps);
        assert_eq!(a.observations, b.observations);
        for (p, q) in a.ground_truth.as_ref().unwrap().iter().zip(b.ground_truth.as_ref().unwrap()) {
            assert!(p.translation == q.translation && (p.rotation.matrix() - q.rotation.matrix()).amax() < 1e-12);
        }
        assert_eq!(back.scan(1, 5).unwrap(), d.scan(1, 5).unwrap());
        assert!(back.world().is_some());
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(DatasetError::Empty(_))));
        assert!(Dataset::load(&dir.path().join("missing")).is_err());
    }
}
