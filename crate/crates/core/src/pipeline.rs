//! Single-robot mapping: front-end, loop closures through ICM, and
//! pose-graph optimization, plus batch runs over a dataset.

use crate::frontend::{detect_loop_closures, Frontend, FrontendConfig, FrontendError, KeyScan};
use crate::geometry::Pose3;
use crate::icm::{Icm, IcmError, IcmThresholds, LoopClosure, SubmitOutcome, Verdict};
use crate::optimizer::{optimize, OptimizationReport, OptimizerError, OptimizerParams};
use crate::pointcloud::PointCloud;
use crate::posegraph::payload::Payload;
use crate::posegraph::{diagonal_information, isotropic_information3, degenerate_odometry_information, odometry_information, EdgeId, GraphError, NodeId, PoseGraph, ARTIFACT_SIGMA};
use crate::sim::dataset::{ArtifactObservation, Dataset, DatasetError, RobotTrack};
use crate::sim::scenario::OutlierSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPriors {
    /// A prior is attached to every `every`-th key.
    pub every: usize,
    pub sigma_rotation: f64,
    pub sigma_translation: f64,
}

impl Default for GroundTruthPriors {
    fn default() -> Self {
        Self { every: 20, sigma_rotation: 0.01, sigma_translation: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub frontend: FrontendConfig,
    pub loop_closure: bool,
    pub icm: bool,
    pub icm_thresholds: IcmThresholds,
    pub optimizer: OptimizerParams,
    /// Sparse surveyed pose priors taken from ground truth.
    pub ground_truth_priors: Option<GroundTruthPriors>,
    /// Feed the dataset's labeled outlier closures to the back-end
    /// (only while loop closure is enabled).
    pub inject_outliers: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            loop_closure: true,
            icm: true,
            icm_thresholds: IcmThresholds::SINGLE_ROBOT,
            optimizer: OptimizerParams::default(),
            ground_truth_priors: None,
            inject_outliers: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Icm(#[from] IcmError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("ground-truth priors need a dataset with ground truth")]
    MissingGroundTruth,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopStats {
    pub candidates: usize,
    pub rejected_odometry: usize,
    pub injected: usize,
    pub optimizations: usize,
}

/// Mapping state of one robot.
pub struct RobotMapper {
    pub robot: u16,
    cfg: PipelineConfig,
    frontend: Frontend,
    pub graph: PoseGraph,
    pub icm: Icm,
    keys: Vec<KeyScan>,
    observations: BTreeMap<usize, Vec<ArtifactObservation>>,
    ground_truth: Option<Vec<Pose3>>,
    outliers: Vec<OutlierSpec>,
    /// Edges of injected outlier closures.
    pub injected_edges: Vec<EdgeId>,
    pub scan_poses: Vec<Pose3>,
    pub scan_to_scan_poses: Vec<Pose3>,
    pub low_confidence: usize,
    pub stats: LoopStats,
    pub last_optimization: Option<OptimizationReport>,
}

impl RobotMapper {
    pub fn new(track: &RobotTrack, outliers: &[OutlierSpec], cfg: PipelineConfig) -> Result<Self, PipelineError> {
        if cfg.ground_truth_priors.is_some() && track.ground_truth.is_none() {
            return Err(PipelineError::MissingGroundTruth);
        }
        let mut observations: BTreeMap<usize, Vec<ArtifactObservation>> = BTreeMap::new();
        for o in &track.observations {
            observations.entry(o.scan).or_default().push(o.clone());
        }
        let icm = if cfg.icm { Icm::new(cfg.icm_thresholds) } else { Icm::disabled() };
        let outliers = if cfg.loop_closure && cfg.inject_outliers && track.ground_truth.is_some() {
            outliers.iter().filter(|o| o.robot == track.id).cloned().collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            robot: track.id,
            frontend: Frontend::new(track.id, cfg.frontend.clone(), track.start_prior),
            graph: {
                let mut g = PoseGraph::new();
                let first = NodeId::robot(track.id, 0);
                g.add_pose(first, track.start_prior)?;
                g.add_pose_prior(first, track.start_prior, diagonal_information(track.prior_sigma_rotation, track.prior_sigma_translation))?;
                g
            },
            cfg,
            icm,
            keys: Vec::new(),
            observations,
            ground_truth: track.ground_truth.clone(),
            outliers,
            injected_edges: Vec::new(),
            scan_poses: Vec::new(),
            scan_to_scan_poses: Vec::new(),
            low_confidence: 0,
            stats: LoopStats::default(),
            last_optimization: None,
        })
    }

    pub fn keys(&self) -> &[KeyScan] {
        &self.keys
    }

    /// Key-scan clouds in the sensor frame, by node.
    pub fn key_clouds(&self) -> BTreeMap<NodeId, PointCloud> {
        self.keys.iter().map(|k| (k.id, k.cloud.cloud().clone())).collect()
    }

    fn submit(&mut self, closure: LoopClosure) -> Result<Option<SubmitOutcome>, PipelineError> {
        match self.icm.submit(&mut self.graph, closure, odometry_information()) {
            Ok(outcome) => {
                if matches!(outcome.verdict, Verdict::RejectedOdometry { .. }) {
                    self.stats.rejected_odometry += 1;
                }
                Ok(Some(outcome))
            }
            // The same pair and measurement was already submitted.
            Err(IcmError::Graph(GraphError::DuplicateEdge { .. })) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn optimize(&mut self) -> Result<(), PipelineError> {
        let report = optimize(&mut self.graph, &self.cfg.optimizer)?;
        self.stats.optimizations += 1;
        self.last_optimization = Some(report);
        Ok(())
    }

    /// Processes the next scan of this robot.
    pub fn process(&mut self, scan: &PointCloud, timestamp: f64) -> Result<(), PipelineError> {
        let update = self.frontend.process_scan(scan, timestamp)?;
        self.scan_poses.push(update.pose);
        self.scan_to_scan_poses.push(update.scan_to_scan_pose);
        self.low_confidence += update.low_confidence as usize;
        let Some((key, edge)) = update.key else {
            return Ok(());
        };
        if let Some(edge) = &edge {
            let previous = self.graph.pose(&edge.from).expect("previous key is in the graph");
            self.graph.add_pose(key.id, previous.compose(&edge.measurement))?;
            let info = if edge.degenerate { degenerate_odometry_information() } else { odometry_information() };
            self.graph.add_odometry(edge.from, edge.to, edge.measurement, info)?;
        }
        self.keys.push(key.clone());
        if let (Some(priors), Some(gt)) = (&self.cfg.ground_truth_priors, &self.ground_truth) {
            if key.id.index as usize % priors.every.max(1) == 0 && key.id.index > 0 {
                let info = diagonal_information(priors.sigma_rotation, priors.sigma_translation);
                self.graph.add_pose_prior(key.id, gt[key.scan_index], info)?;
            }
        }
        if let Some(obs) = self.observations.get(&key.scan_index) {
            for o in obs.clone() {
                self.graph.add_artifact_observation(key.id, NodeId::artifact(o.artifact), o.measurement, isotropic_information3(ARTIFACT_SIGMA))?;
            }
        }
        let mut changed = false;
        if self.cfg.loop_closure {
            let graph = &self.graph;
            let candidates = detect_loop_closures(&key, &self.keys[..self.keys.len() - 1], |id| graph.pose(id), &self.cfg.frontend);
            self.stats.candidates += candidates.len();
            for c in candidates {
                if let Some(outcome) = self.submit(LoopClosure::new(c.from, c.to, c.relative))? {
                    changed |= !outcome.entered.is_empty() || !outcome.left.is_empty();
                }
            }
        }
        changed |= self.inject_outliers(&key)?;
        if changed {
            self.optimize()?;
        }
        Ok(())
    }

    /// Submits labeled outliers whose later scan maps to `key`.
    fn inject_outliers(&mut self, key: &KeyScan) -> Result<bool, PipelineError> {
        let Some(gt) = self.ground_truth.clone() else {
            return Ok(false);
        };
        let previous_scan = self.keys.iter().rev().nth(1).map(|k| k.scan_index);
        let due: Vec<OutlierSpec> = self
            .outliers
            .iter()
            .filter(|o| o.to_scan <= key.scan_index && previous_scan.is_none_or(|p| o.to_scan > p))
            .cloned()
            .collect();
        let mut changed = false;
        for o in due {
            let Some(from) = self.keys.iter().find(|k| k.scan_index >= o.from_scan) else {
                continue;
            };
            if key.id.index.abs_diff(from.id.index) <= 1 {
                continue;
            }
            let measurement = o.measurement(&gt[from.scan_index], &gt[key.scan_index]);
            let from_id = from.id;
            if let Some(outcome) = self.submit(LoopClosure::new(from_id, key.id, measurement))? {
                self.stats.injected += 1;
                if let Verdict::Inlier { edge } | Verdict::Outlier { edge } = outcome.verdict {
                    self.injected_edges.push(edge);
                }
                changed |= !outcome.entered.is_empty() || !outcome.left.is_empty();
            }
        }
        Ok(changed)
    }

    /// Everything created after `since`, with the clouds of new keys.
    pub fn payload(&self, since: u64) -> Payload {
        let clouds: BTreeMap<NodeId, PointCloud> = self
            .keys
            .iter()
            .filter(|k| self.graph.node(&k.id).is_some_and(|n| n.created > since))
            .map(|k| (k.id, k.cloud.cloud().clone()))
            .collect();
        Payload::from_graph(self.robot, &self.graph, &clouds, since)
    }

    /// Processes scans `range` of `track`, generating them in parallel batches.
    pub fn process_scans(&mut self, dataset: &Dataset, track: &RobotTrack, range: std::ops::Range<usize>) -> Result<(), PipelineError> {
        let batch = 16;
        let mut start = range.start;
        let end = range.end.min(track.len());
        while start < end {
            let stop = (start + batch).min(end);
            let scans: Vec<PointCloud> = (start..stop).into_par_iter().map(|i| dataset.scan(track.id, i)).collect::<Result<_, _>>()?;
            for (k, scan) in scans.iter().enumerate() {
                self.process(scan, track.timestamps[start + k])?;
            }
            start = stop;
        }
        Ok(())
    }

    /// Optimized key poses paired with the scan index of each key.
    pub fn key_trajectory(&self) -> Vec<(NodeId, usize, Pose3)> {
        self.keys.iter().map(|k| (k.id, k.scan_index, self.graph.pose(&k.id).expect("key in graph"))).collect()
    }
}

/// Result of mapping every robot of a dataset independently.
pub struct PipelineRun {
    pub robots: Vec<RobotMapper>,
}

/// Runs every robot of `dataset` through its own mapper.
pub fn run_dataset(dataset: &Dataset, cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    let robots = dataset
        .robots
        .par_iter()
        .map(|track| {
            let mut mapper = RobotMapper::new(track, &dataset.outliers, cfg.clone())?;
            mapper.process_scans(dataset, track, 0..track.len())?;
            mapper.optimize()?;
            Ok(mapper)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(PipelineRun { robots })
}

/// Fuses key clouds at the graph's estimates into one map.
pub fn fuse_map<'a>(graph: &PoseGraph, clouds: impl IntoIterator<Item = (&'a NodeId, &'a PointCloud)>, leaf: f64) -> PointCloud {
    let mut map = PointCloud::default();
    for (id, cloud) in clouds {
        if let Some(pose) = graph.pose(id) {
            map.extend(&cloud.transformed(&pose));
        }
    }
    if map.is_empty() {
        return map;
    }
    map.voxel_downsample(leaf).unwrap_or(map)
}
