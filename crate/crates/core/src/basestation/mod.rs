//! Centralized multi-robot back-end.
//!
//! Robots send incremental payloads of their pose graphs and key-scan clouds.
//! The base station merges them into one graph in the shared frame, searches
//! for loop closures between robots, filters them with its own ICM instance
//! and re-optimizes after every ingest batch or manual edit. Robot-local
//! graphs are never modified.

pub mod comm;
pub mod fleet;

use crate::frontend::FrontendConfig;
use crate::geometry::{Pose3, Vec3};
use crate::icm::{Icm, IcmError, IcmThresholds, LoopClosure, Verdict};
use crate::metrics;
use crate::optimizer::{optimize, OptimizationReport, OptimizerError, OptimizerParams};
use crate::pipeline::fuse_map;
use crate::pointcloud::{ply, PointCloud};
use crate::posegraph::g2o::{self, Record};
use crate::posegraph::payload::{Payload, PayloadError};
use crate::posegraph::{odometry_information, EdgeId, EdgeKind, Factor, GraphError, NodeId, NodeValue, PoseGraph};
use crate::registration::{align, GicpParams, PreparedCloud, RegistrationError, RegistrationResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub use comm::{CommBus, CommConfig};
pub use fleet::{key_ground_truth, run_fleet, FleetConfig, FleetError, FleetRun};

/// Fitness gate for closures found by the base station (accept if ≤).
pub const INTER_ROBOT_FITNESS: f64 = 0.18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasestationConfig {
    /// Automatic search for closures between robots.
    pub inter_robot_closures: bool,
    pub loop_radius: f64,
    pub fitness_threshold: f64,
    /// Gate for manual closures within one robot.
    pub intra_robot_fitness_threshold: f64,
    /// Registrations attempted per new key, nearest first.
    pub max_candidates_per_key: usize,
    pub matching: GicpParams,
    /// Largest rotation a zero-translation manual registration may add.
    pub max_rotation_change: f64,
    pub icm: bool,
    pub inter_robot_thresholds: IcmThresholds,
    pub intra_robot_thresholds: IcmThresholds,
    pub optimizer: OptimizerParams,
    pub map_leaf: f64,
    /// State is written here whenever the revision crosses a multiple of
    /// `persist_every`, and on shutdown.
    pub persist_dir: Option<PathBuf>,
    pub persist_every: u64,
    pub comm: CommConfig,
}

impl Default for BasestationConfig {
    fn default() -> Self {
        let frontend = FrontendConfig::default();
        Self {
            inter_robot_closures: true,
            loop_radius: frontend.loop_radius,
            fitness_threshold: INTER_ROBOT_FITNESS,
            intra_robot_fitness_threshold: frontend.loop_fitness,
            max_candidates_per_key: 1,
            matching: GicpParams::loop_closure(),
            max_rotation_change: frontend.loop_max_rotation_change,
            icm: true,
            inter_robot_thresholds: IcmThresholds::MULTI_ROBOT,
            intra_robot_thresholds: IcmThresholds::SINGLE_ROBOT,
            optimizer: OptimizerParams::default(),
            map_leaf: 0.1,
            persist_dir: None,
            persist_every: 50,
            comm: CommConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BasestationError {
    #[error(transparent)]
    CorruptPayload(#[from] PayloadError),
    #[error("robot {robot} sent conflicting data for revision {revision}: {detail}")]
    ConflictingRevision { robot: u16, revision: u64, detail: String },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("registration failed: {0}")]
    RegistrationFailed(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Icm(#[from] IcmError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("persistence: {0}")]
    Persist(String),
}

impl From<std::io::Error> for BasestationError {
    fn from(e: std::io::Error) -> Self {
        BasestationError::Persist(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestStatus {
    Applied,
    /// Already covered by an earlier payload.
    Duplicate,
    /// Starts after a revision not yet received; held until the gap is filled.
    Buffered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureReport {
    pub from: NodeId,
    pub to: NodeId,
    pub fitness: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub robot: u16,
    pub status: IngestStatus,
    /// Latest robot revision merged so far.
    pub robot_revision: u64,
    pub new_nodes: usize,
    pub new_edges: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationReport {
    pub merges: Vec<MergeReport>,
    pub closures: Vec<ClosureReport>,
    pub optimization: Option<OptimizationReport>,
    /// Set when the merged graph could not be optimized (e.g. no prior yet).
    pub optimization_error: Option<String>,
    pub revision: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    Estimate,
    ZeroTranslation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManualClosureReport {
    pub from: NodeId,
    pub to: NodeId,
    pub fitness: f64,
    pub initialization: Initialization,
    pub measurement: Pose3,
    pub accepted: bool,
    pub verdict: Verdict,
    pub revision: u64,
    pub optimization: Option<OptimizationReport>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RobotState {
    /// Latest sender revision merged.
    applied: u64,
    /// Sender edge ordinal → merged edge.
    edge_map: Vec<EdgeId>,
    /// Sender-frame pose estimates as last received.
    reported: BTreeMap<NodeId, Pose3>,
    #[serde(skip)]
    pending: BTreeMap<(u64, u64), Payload>,
}

/// Ground truth used for reporting only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub poses: BTreeMap<NodeId, Pose3>,
    pub artifacts: BTreeMap<NodeId, Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotMetrics {
    pub robot: u16,
    pub keys: usize,
    pub robot_revision: u64,
    pub end_to_end_error: Option<f64>,
    /// RMS position error without alignment (shared frame).
    pub ate: Option<f64>,
    pub drift_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactError {
    pub id: NodeId,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasestationMetrics {
    pub revision: u64,
    pub nodes: usize,
    pub edges: usize,
    pub inter_robot_inliers: usize,
    pub inter_robot_outliers: usize,
    pub manual_closures: usize,
    pub optimizations: usize,
    pub robots: Vec<RobotMetrics>,
    /// Unaligned RMS position error over every robot key.
    pub fleet_ate: Option<f64>,
    pub artifacts: Vec<ArtifactError>,
    pub mean_artifact_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub id: NodeId,
    pub robot: Option<u16>,
    #[serde(flatten)]
    pub value: NodeValue,
    pub created: u64,
    pub modified: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcmStatus {
    Inlier,
    Outlier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeView {
    pub index: EdgeId,
    pub kind: EdgeKind,
    pub from: NodeId,
    pub to: Option<NodeId>,
    pub active: bool,
    /// For closures filtered by the base station.
    pub icm: Option<IcmStatus>,
    pub inter_robot: bool,
    pub created: u64,
    pub modified: u64,
}

/// Nodes and edges changed after `since`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphView {
    pub revision: u64,
    pub since: u64,
    pub nodes: Vec<NodeView>,
    pub edges: Vec<EdgeView>,
}

#[derive(Serialize, Deserialize)]
struct PersistedState {
    graph: PoseGraph,
    robots: BTreeMap<u16, RobotState>,
    inter_icm: Icm,
    intra_icm: Icm,
    attempted: BTreeSet<(NodeId, NodeId)>,
    unsearched: BTreeSet<NodeId>,
    manual_closures: usize,
    optimizations: usize,
    ground_truth: Option<GroundTruth>,
}

pub struct Basestation {
    cfg: BasestationConfig,
    graph: PoseGraph,
    clouds: BTreeMap<NodeId, Arc<PreparedCloud>>,
    robots: BTreeMap<u16, RobotState>,
    inter_icm: Icm,
    intra_icm: Icm,
    attempted: BTreeSet<(NodeId, NodeId)>,
    unsearched: BTreeSet<NodeId>,
    manual_closures: usize,
    optimizations: usize,
    last_persisted: u64,
    ground_truth: Option<GroundTruth>,
}

fn owned_by(robot: u16, id: &NodeId) -> bool {
    id.robot_id().is_none_or(|r| r == robot)
}

impl Basestation {
    pub fn new(cfg: BasestationConfig) -> Self {
        let icm = |th: IcmThresholds| if cfg.icm { Icm::new(th) } else { Icm::disabled() };
        Self {
            inter_icm: icm(cfg.inter_robot_thresholds),
            intra_icm: icm(cfg.intra_robot_thresholds),
            cfg,
            graph: PoseGraph::new(),
            clouds: BTreeMap::new(),
            robots: BTreeMap::new(),
            attempted: BTreeSet::new(),
            unsearched: BTreeSet::new(),
            manual_closures: 0,
            optimizations: 0,
            last_persisted: 0,
            ground_truth: None,
        }
    }

    pub fn config(&self) -> &BasestationConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    pub fn revision(&self) -> u64 {
        self.graph.revision()
    }

    pub fn clouds(&self) -> impl Iterator<Item = (&NodeId, &PointCloud)> {
        self.clouds.iter().map(|(k, c)| (k, c.cloud()))
    }

    /// Latest revision merged for `robot` (0 if none).
    pub fn robot_revision(&self, robot: u16) -> u64 {
        self.robots.get(&robot).map_or(0, |s| s.applied)
    }

    pub fn inter_robot_icm(&self) -> &Icm {
        &self.inter_icm
    }

    pub fn set_ground_truth(&mut self, truth: GroundTruth) {
        self.ground_truth = Some(truth);
    }

    /// Merges one payload and integrates it (closure search, optimization).
    pub fn ingest(&mut self, bytes: &[u8]) -> Result<IntegrationReport, BasestationError> {
        self.ingest_batch(std::iter::once(bytes))
    }

    /// Merges every payload, then searches and optimizes once.
    pub fn ingest_batch<'a>(&mut self, batch: impl IntoIterator<Item = &'a [u8]>) -> Result<IntegrationReport, BasestationError> {
        let mut merges = Vec::new();
        for bytes in batch {
            let payload = Payload::unmarshal(bytes)?;
            merges.extend(self.merge(payload)?);
        }
        let mut report = self.integrate()?;
        report.merges = merges;
        Ok(report)
    }

    /// Merges a payload without searching or optimizing. Payloads that start
    /// beyond the merged revision are buffered; buffered payloads that become
    /// applicable are merged too.
    pub fn merge(&mut self, payload: Payload) -> Result<Vec<MergeReport>, BasestationError> {
        let robot = payload.robot;
        let state = self.robots.entry(robot).or_default();
        if payload.revision <= state.applied {
            return Ok(vec![MergeReport { robot, status: IngestStatus::Duplicate, robot_revision: state.applied, new_nodes: 0, new_edges: 0 }]);
        }
        if payload.since > state.applied {
            let applied = state.applied;
            state.pending.insert((payload.since, payload.revision), payload);
            return Ok(vec![MergeReport { robot, status: IngestStatus::Buffered, robot_revision: applied, new_nodes: 0, new_edges: 0 }]);
        }
        let mut reports = vec![self.apply(payload)?];
        loop {
            let state = self.robots.get_mut(&robot).expect("robot state exists");
            let applied = state.applied;
            let Some(key) = state.pending.keys().find(|(since, _)| *since <= applied).copied() else {
                break;
            };
            let next = state.pending.remove(&key).expect("key exists");
            if next.revision > applied {
                reports.push(self.apply(next)?);
            }
        }
        Ok(reports)
    }

    /// Applies records atomically: on error nothing changes.
    fn apply(&mut self, payload: Payload) -> Result<MergeReport, BasestationError> {
        let robot = payload.robot;
        let conflict = |detail: String| BasestationError::ConflictingRevision { robot, revision: payload.revision, detail };
        let mut graph = self.graph.clone();
        let mut state = self.robots.get(&robot).cloned().unwrap_or_default();
        let (mut new_nodes, mut new_edges) = (Vec::new(), 0usize);
        let mut ordinal = payload.edge_offset;
        if ordinal > state.edge_map.len() {
            return Err(conflict(format!("edge block starts at {ordinal} but only {} edges are known", state.edge_map.len())));
        }
        for record in &payload.records {
            match record {
                Record::Vertex(id, value) => {
                    if !owned_by(robot, id) {
                        return Err(PayloadError::CorruptPayload(format!("robot {robot} sent foreign node {id}")).into());
                    }
                    if let NodeValue::Pose(p) = value {
                        state.reported.insert(*id, *p);
                    }
                    if graph.contains(id) {
                        continue;
                    }
                    let initial = match value {
                        NodeValue::Pose(p) => Self::initial_pose(&graph, &state, id, p),
                        v => *v,
                    };
                    match initial {
                        NodeValue::Pose(p) => graph.add_pose(*id, p)?,
                        NodeValue::Point(p) => graph.add_point(*id, p)?,
                    };
                    new_nodes.push(*id);
                }
                Record::Edge(kind, factor) => {
                    if let Some(&known) = state.edge_map.get(ordinal) {
                        let e = graph.edge(known).expect("mapped edge exists");
                        if e.kind != *kind || e.factor != *factor {
                            return Err(conflict(format!("edge ordinal {ordinal} differs from the merged edge")));
                        }
                    } else {
                        let (a, b) = factor.nodes();
                        if !owned_by(robot, &a) || b.is_some_and(|b| !owned_by(robot, &b)) {
                            return Err(PayloadError::CorruptPayload(format!("robot {robot} sent an edge on foreign nodes")).into());
                        }
                        let id = match g2o::apply_record(&mut graph, record, |_| None) {
                            Ok(id) => id.expect("edge records yield an edge"),
                            // Present already, e.g. after a restore from disk.
                            Err(GraphError::DuplicateEdge { .. }) => graph
                                .edges()
                                .iter()
                                .position(|e| e.kind == *kind && e.factor == *factor)
                                .expect("duplicate exists"),
                            Err(e) => return Err(e.into()),
                        };
                        state.edge_map.push(id);
                        new_edges += 1;
                    }
                    ordinal += 1;
                }
                Record::Active { ordinal: o, active } => {
                    let edge = *state.edge_map.get(*o).ok_or_else(|| conflict(format!("activity record for unknown edge {o}")))?;
                    graph.set_active(edge, *active)?;
                }
            }
        }
        let mut clouds = Vec::new();
        for (id, cloud) in payload.clouds {
            if !owned_by(robot, &id) || !id.is_pose() {
                return Err(PayloadError::CorruptPayload(format!("cloud for foreign node {id}")).into());
            }
            if !graph.contains(&id) {
                return Err(PayloadError::CorruptPayload(format!("cloud for missing node {id}")).into());
            }
            if !self.clouds.contains_key(&id) && !cloud.is_empty() {
                clouds.push((id, cloud));
            }
        }
        let prepared: Vec<(NodeId, Arc<PreparedCloud>)> = clouds.into_par_iter().map(|(id, c)| (id, Arc::new(PreparedCloud::new(c)))).collect();
        for (id, c) in prepared {
            self.clouds.insert(id, c);
            self.unsearched.insert(id);
        }
        state.applied = payload.revision;
        self.graph = graph;
        self.robots.insert(robot, state);
        let applied = self.robots[&robot].applied;
        Ok(MergeReport { robot, status: IngestStatus::Applied, robot_revision: applied, new_nodes: new_nodes.len(), new_edges })
    }

    /// Places a new robot pose relative to the closest earlier pose already
    /// merged, keeping the sender's relative estimate.
    fn initial_pose(graph: &PoseGraph, state: &RobotState, id: &NodeId, reported: &Pose3) -> NodeValue {
        let anchor = state
            .reported
            .range(..*id)
            .rev()
            .take_while(|(a, _)| a.namespace == id.namespace)
            .find_map(|(a, r)| graph.pose(a).map(|merged| (merged, r)));
        match anchor {
            Some((merged, r)) => NodeValue::Pose(merged.compose(&r.between(reported))),
            None => NodeValue::Pose(*reported),
        }
    }

    /// Searches closures for keys merged since the last call, filters them
    /// through ICM and re-optimizes.
    pub fn integrate(&mut self) -> Result<IntegrationReport, BasestationError> {
        let closures = if self.cfg.inter_robot_closures { self.search_inter_robot()? } else { Vec::new() };
        self.unsearched.clear();
        let mut report = IntegrationReport { closures, ..Default::default() };
        match self.optimize() {
            Ok(r) => report.optimization = Some(r),
            Err(e) => report.optimization_error = Some(e.to_string()),
        }
        report.revision = self.graph.revision();
        self.maybe_persist()?;
        Ok(report)
    }

    pub fn optimize(&mut self) -> Result<OptimizationReport, BasestationError> {
        if self.graph.is_empty() {
            return Err(OptimizerError::SingularSystem("empty graph".into()).into());
        }
        let r = optimize(&mut self.graph, &self.cfg.optimizer)?;
        self.optimizations += 1;
        Ok(r)
    }

    fn keys_with_clouds(&self) -> Vec<(NodeId, Pose3)> {
        self.clouds.keys().filter_map(|id| self.graph.pose(id).map(|p| (*id, p))).collect()
    }

    /// Candidate pairs `(from, to)` with `from < to`, from different robots,
    /// within the search radius of a newly merged key.
    pub fn inter_robot_candidates(&self) -> Vec<(NodeId, NodeId)> {
        let keys = self.keys_with_clouds();
        let mut pairs = BTreeSet::new();
        for new in &self.unsearched {
            let Some(p) = self.graph.pose(new) else { continue };
            let mut near: Vec<(f64, NodeId)> = keys
                .iter()
                .filter(|(id, _)| id.namespace != new.namespace)
                .map(|(id, q)| ((q.translation - p.translation).norm(), *id))
                .filter(|(d, _)| *d <= self.cfg.loop_radius)
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (_, other) in near.into_iter().take(self.cfg.max_candidates_per_key) {
                let pair = if *new < other { (*new, other) } else { (other, *new) };
                if !self.attempted.contains(&pair) {
                    pairs.insert(pair);
                }
            }
        }
        pairs.into_iter().collect()
    }

    fn register(&self, from: &NodeId, to: &NodeId, init: &Pose3) -> Result<RegistrationResult, RegistrationError> {
        align(&self.clouds[to], &self.clouds[from], init, &self.cfg.matching)
    }

    fn search_inter_robot(&mut self) -> Result<Vec<ClosureReport>, BasestationError> {
        let pairs = self.inter_robot_candidates();
        let registered: Vec<(NodeId, NodeId, Option<RegistrationResult>)> = pairs
            .par_iter()
            .map(|(from, to)| {
                let init = self.graph.pose(from).expect("key").between(&self.graph.pose(to).expect("key"));
                (*from, *to, self.register(from, to, &init).ok())
            })
            .collect();
        let mut reports = Vec::new();
        for (from, to, result) in registered {
            self.attempted.insert((from, to));
            let Some(r) = result.filter(|r| r.converged && r.fitness <= self.cfg.fitness_threshold) else {
                continue;
            };
            let outcome = self.inter_icm.submit(&mut self.graph, LoopClosure::new(from, to, r.transform), odometry_information())?;
            reports.push(ClosureReport { from, to, fitness: r.fitness, verdict: outcome.verdict });
        }
        Ok(reports)
    }

    /// Operator-requested closure between two stored keys. The closure goes
    /// through ICM; if it is not an inlier the graph is left untouched.
    pub fn manual_loop_closure(&mut self, from: NodeId, to: NodeId) -> Result<ManualClosureReport, BasestationError> {
        for id in [&from, &to] {
            if self.graph.pose(id).is_none() || !self.clouds.contains_key(id) {
                return Err(BasestationError::UnknownNode(*id));
            }
        }
        if from == to {
            return Err(BasestationError::RegistrationFailed("a node cannot close a loop with itself".into()));
        }
        if to.is_successor_of(&from) || from.is_successor_of(&to) {
            return Err(BasestationError::RegistrationFailed("consecutive keys are already linked by odometry".into()));
        }
        let inter = from.namespace != to.namespace;
        let gate = if inter { self.cfg.fitness_threshold } else { self.cfg.intra_robot_fitness_threshold };
        let (pf, pt) = (self.graph.pose(&from).expect("checked"), self.graph.pose(&to).expect("checked"));
        let estimate = pf.between(&pt);
        let zero = Pose3::from_rotation(estimate.rotation);
        let mut failures = Vec::new();
        let mut found = None;
        for (kind, init) in [(Initialization::Estimate, estimate), (Initialization::ZeroTranslation, zero)] {
            match self.register(&from, &to, &init) {
                Ok(r) if r.converged && r.fitness <= gate => {
                    let turned = (init.rotation.inverse() * r.transform.rotation).angle();
                    if kind == Initialization::ZeroTranslation && turned > self.cfg.max_rotation_change {
                        failures.push(format!("{kind:?}: rotated {:.1} deg away from the estimate", turned.to_degrees()));
                        continue;
                    }
                    found = Some((kind, r));
                    break;
                }
                Ok(r) => failures.push(format!("{kind:?}: converged {} fitness {:.3} (gate {gate})", r.converged, r.fitness)),
                Err(e) => failures.push(format!("{kind:?}: {e}")),
            }
        }
        let Some((initialization, r)) = found else {
            return Err(BasestationError::RegistrationFailed(failures.join("; ")));
        };
        let snapshot = (self.graph.clone(), self.inter_icm.clone(), self.intra_icm.clone());
        let closure = LoopClosure::new(from, to, r.transform);
        let icm = if inter { &mut self.inter_icm } else { &mut self.intra_icm };
        let outcome = match icm.submit(&mut self.graph, closure, odometry_information()) {
            Ok(o) => o,
            Err(e) => {
                (self.graph, self.inter_icm, self.intra_icm) = snapshot;
                return Err(e.into());
            }
        };
        let accepted = outcome.is_inlier();
        let mut report = ManualClosureReport {
            from,
            to,
            fitness: r.fitness,
            initialization,
            measurement: r.transform,
            accepted,
            verdict: outcome.verdict,
            revision: 0,
            optimization: None,
        };
        if accepted {
            self.manual_closures += 1;
            report.optimization = Some(self.optimize()?);
            self.maybe_persist()?;
        } else {
            (self.graph, self.inter_icm, self.intra_icm) = snapshot;
        }
        report.revision = self.graph.revision();
        Ok(report)
    }

    /// Key clouds at their optimized poses, re-voxelized at `leaf`
    /// (the configured map leaf when `None`).
    pub fn export_map(&self, leaf: Option<f64>) -> PointCloud {
        let leaf = leaf.unwrap_or(self.cfg.map_leaf);
        fuse_map(&self.graph, self.clouds.iter().map(|(k, c)| (k, c.cloud())), leaf)
    }

    pub fn graph_view(&self, since: u64) -> GraphView {
        let inliers: BTreeSet<EdgeId> = self.inter_icm.inlier_edges().into_iter().chain(self.intra_icm.inlier_edges()).collect();
        let filtered: BTreeSet<EdgeId> = self.inter_icm.entries().iter().chain(self.intra_icm.entries()).map(|e| e.edge).collect();
        let nodes = self
            .graph
            .nodes()
            .filter(|(_, n)| n.modified > since)
            .map(|(id, n)| NodeView { id: *id, robot: id.robot_id(), value: n.value, created: n.created, modified: n.modified })
            .collect();
        let edges = self
            .graph
            .edges()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.modified > since)
            .map(|(i, e)| {
                let (from, to) = e.factor.nodes();
                let icm = filtered.contains(&i).then(|| if inliers.contains(&i) { IcmStatus::Inlier } else { IcmStatus::Outlier });
                let inter_robot = e.kind == EdgeKind::LoopClosure && to.is_some_and(|t| t.namespace != from.namespace);
                EdgeView { index: i, kind: e.kind, from, to, active: e.active, icm, inter_robot, created: e.created, modified: e.modified }
            })
            .collect();
        GraphView { revision: self.graph.revision(), since, nodes, edges }
    }

    pub fn metrics(&self) -> BasestationMetrics {
        let truth = self.ground_truth.as_ref();
        let mut robots = Vec::new();
        let (mut all_gt, mut all_est) = (Vec::new(), Vec::new());
        for (&robot, state) in &self.robots {
            let keys: Vec<(NodeId, Pose3)> = self.graph.robot_poses(robot);
            let pairs: Vec<(Pose3, Pose3)> = truth
                .map(|t| keys.iter().filter_map(|(id, p)| t.poses.get(id).map(|g| (*g, *p))).collect())
                .unwrap_or_default();
            let (gt, est): (Vec<Pose3>, Vec<Pose3>) = pairs.into_iter().unzip();
            all_gt.extend(gt.iter().map(|p| p.translation));
            all_est.extend(est.iter().map(|p| p.translation));
            let gt_t: Vec<Vec3> = gt.iter().map(|p| p.translation).collect();
            let est_t: Vec<Vec3> = est.iter().map(|p| p.translation).collect();
            robots.push(RobotMetrics {
                robot,
                keys: keys.len(),
                robot_revision: state.applied,
                end_to_end_error: metrics::end_to_end_error(&gt, &est),
                ate: metrics::ate(&gt_t, &est_t, false),
                drift_percent: (gt.len() > 1).then(|| metrics::rpe(&gt, &est, 10.0)).flatten().map(|s| s.drift_percent),
            });
        }
        let artifacts: Vec<ArtifactError> = truth
            .map(|t| t.artifacts.iter().filter_map(|(id, g)| self.graph.point(id).map(|p| ArtifactError { id: *id, error: (p - g).norm() })).collect())
            .unwrap_or_default();
        let mean_artifact_error = (!artifacts.is_empty()).then(|| artifacts.iter().map(|a| a.error).sum::<f64>() / artifacts.len() as f64);
        BasestationMetrics {
            revision: self.graph.revision(),
            nodes: self.graph.node_count(),
            edges: self.graph.edge_count(),
            inter_robot_inliers: self.inter_icm.inlier_edges().len(),
            inter_robot_outliers: self.inter_icm.entries().len() - self.inter_icm.inlier_edges().len(),
            manual_closures: self.manual_closures,
            optimizations: self.optimizations,
            robots,
            fleet_ate: metrics::ate(&all_gt, &all_est, false),
            artifacts,
            mean_artifact_error,
        }
    }

    fn maybe_persist(&mut self) -> Result<(), BasestationError> {
        let every = self.cfg.persist_every.max(1);
        if self.cfg.persist_dir.is_some() && self.graph.revision() / every > self.last_persisted / every {
            self.persist()?;
        }
        Ok(())
    }

    /// Writes the state to the configured directory.
    pub fn persist(&mut self) -> Result<(), BasestationError> {
        if let Some(dir) = self.cfg.persist_dir.clone() {
            self.save(&dir)?;
            self.last_persisted = self.graph.revision();
        }
        Ok(())
    }

    /// Final persistence on shutdown.
    pub fn shutdown(mut self) -> Result<(), BasestationError> {
        self.persist()
    }

    /// Writes `state.json`, `graph.g2o` and one PLY per key cloud.
    pub fn save(&self, dir: &Path) -> Result<(), BasestationError> {
        let clouds = dir.join("clouds");
        std::fs::create_dir_all(&clouds)?;
        let state = PersistedState {
            graph: self.graph.clone(),
            robots: self.robots.clone(),
            inter_icm: self.inter_icm.clone(),
            intra_icm: self.intra_icm.clone(),
            attempted: self.attempted.clone(),
            unsearched: self.unsearched.clone(),
            manual_closures: self.manual_closures,
            optimizations: self.optimizations,
            ground_truth: self.ground_truth.clone(),
        };
        let json = serde_json::to_vec(&state).map_err(|e| BasestationError::Persist(e.to_string()))?;
        std::fs::write(dir.join("state.json.tmp"), json)?;
        std::fs::rename(dir.join("state.json.tmp"), dir.join("state.json"))?;
        std::fs::write(dir.join("graph.g2o"), g2o::write_g2o(&self.graph))?;
        for (id, c) in &self.clouds {
            let path = clouds.join(format!("{}.ply", g2o::encode_id(id)));
            if !path.exists() {
                ply::write_ply_file(c.cloud(), &path)?;
            }
        }
        Ok(())
    }

    /// Restores a state written by [`Basestation::save`].
    pub fn restore(dir: &Path, cfg: BasestationConfig) -> Result<Self, BasestationError> {
        let bytes = std::fs::read(dir.join("state.json"))?;
        let state: PersistedState = serde_json::from_slice(&bytes).map_err(|e| BasestationError::Persist(e.to_string()))?;
        let mut clouds = Vec::new();
        for entry in std::fs::read_dir(dir.join("clouds"))? {
            let path = entry?.path();
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()).and_then(g2o::decode_id) else {
                continue;
            };
            let cloud = ply::read_ply_file(&path).map_err(|e| BasestationError::Persist(format!("{}: {e}", path.display())))?;
            clouds.push((id, cloud));
        }
        let clouds = clouds.into_par_iter().map(|(id, c)| (id, Arc::new(PreparedCloud::new(c)))).collect();
        let revision = state.graph.revision();
        Ok(Self {
            cfg,
            graph: state.graph,
            clouds,
            robots: state.robots,
            inter_icm: state.inter_icm,
            intra_icm: state.intra_icm,
            attempted: state.attempted,
            unsearched: state.unsearched,
            manual_closures: state.manual_closures,
            optimizations: state.optimizations,
            last_persisted: revision,
            ground_truth: state.ground_truth,
        })
    }

    /// Edges the base station added (closures between robots or manual).
    pub fn own_closures(&self) -> Vec<(EdgeId, &Factor, bool)> {
        self.inter_icm
            .entries()
            .iter()
            .chain(self.intra_icm.entries())
            .filter_map(|e| self.graph.edge(e.edge).map(|x| (e.edge, &x.factor, x.active)))
            .collect()
    }
}

#[cfg(test)]
mod tests;
