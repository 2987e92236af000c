//! Incremental consistent measurement set maximization.
//!
//! Every loop closure first faces the odometry check: the closure composed
//! with the odometric path back to its start must be near identity. Survivors
//! get a row in the pairwise consistency matrix, and the maximum clique of
//! that matrix is the inlier set. Only inliers are active in the graph.
//!
//! Averaged errors divide the rotation angle and translation norm of the
//! cycle error by `m`, the number of edges in the cycle, loop closures
//! included.

pub mod clique;

pub use clique::{max_clique, ConsistencyMatrix};

use crate::geometry::{Mat6, Pose3};
use crate::posegraph::{EdgeId, EdgeKind, Factor, GraphError, NodeId, PoseGraph};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Slack for comparisons at the exact threshold boundary.
const BOUNDARY_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcmThresholds {
    /// Maximum average rotation error per cycle edge (radians).
    pub rotation: f64,
    /// Maximum average translation error per cycle edge (meters).
    pub translation: f64,
}

impl IcmThresholds {
    pub const SINGLE_ROBOT: IcmThresholds = IcmThresholds { rotation: 0.05, translation: 0.1 };
    pub const MULTI_ROBOT: IcmThresholds = IcmThresholds { rotation: 0.005, translation: 0.05 };

    pub fn new(rotation: f64, translation: f64) -> Result<Self, IcmError> {
        if !(rotation > 0.0 && translation > 0.0) {
            return Err(IcmError::InvalidThresholds);
        }
        Ok(Self { rotation, translation })
    }
}

impl Default for IcmThresholds {
    fn default() -> Self {
        Self::SINGLE_ROBOT
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcmError {
    #[error("no odometric path between {0} and {1}")]
    NoOdometricPath(NodeId, NodeId),
    #[error("thresholds must be positive")]
    InvalidThresholds,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A relative pose measurement `inverse(T_from)·T_to`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopClosure {
    pub from: NodeId,
    pub to: NodeId,
    pub measurement: Pose3,
}

impl LoopClosure {
    pub fn new(from: NodeId, to: NodeId, measurement: Pose3) -> Self {
        Self { from, to, measurement }
    }

    pub fn reversed(&self) -> Self {
        Self { from: self.to, to: self.from, measurement: self.measurement.inverse() }
    }

    /// Same closure oriented so that `from < to`.
    pub fn canonical(&self) -> Self {
        if self.to < self.from {
            self.reversed()
        } else {
            *self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleCheck {
    pub error: Pose3,
    /// Edges in the cycle, loop closures included.
    pub edges: usize,
    pub rotation: f64,
    pub translation: f64,
    pub pass: bool,
}

impl CycleCheck {
    fn new(error: Pose3, edges: usize, th: &IcmThresholds) -> Self {
        let m = edges as f64;
        let rotation = error.rotation.angle() / m;
        let translation = error.translation.norm() / m;
        let pass = rotation <= th.rotation + BOUNDARY_SLACK && translation <= th.translation + BOUNDARY_SLACK;
        Self { error, edges, rotation, translation, pass }
    }
}

/// Relative poses along the odometry chains of a graph.
///
/// Odometry only links consecutive poses of one robot, so each robot's poses
/// split into unbroken chain segments. Within a segment the path from `a` to
/// `b` is `cum_a⁻¹·cum_b` with `|a − b|` edges.
#[derive(Clone, Debug, Default)]
pub struct OdometryIndex {
    entries: BTreeMap<NodeId, (usize, Pose3)>,
}

impl OdometryIndex {
    pub fn new(graph: &PoseGraph) -> Self {
        let mut links: BTreeMap<NodeId, Pose3> = BTreeMap::new();
        for (_, e) in graph.edges_of_kind(EdgeKind::Odometry) {
            if let Factor::Between { from, measurement, .. } = &e.factor {
                links.entry(*from).or_insert(*measurement);
            }
        }
        let mut entries = BTreeMap::new();
        let mut segment = 0usize;
        let mut prev: Option<(NodeId, Pose3)> = None;
        for (id, _) in graph.nodes().filter(|(id, _)| id.is_pose()) {
            let cum = match prev {
                Some((p, cum)) if id.is_successor_of(&p) && links.contains_key(&p) => cum.compose(&links[&p]),
                _ => {
                    segment += 1;
                    Pose3::identity()
                }
            };
            entries.insert(*id, (segment, cum));
            prev = Some((*id, cum));
        }
        Self { entries }
    }

    /// Odometric relative pose from `a` to `b` (≈ `T_a⁻¹·T_b`) and its edge count.
    pub fn path(&self, a: &NodeId, b: &NodeId) -> Result<(Pose3, usize), IcmError> {
        let no_path = || IcmError::NoOdometricPath(*a, *b);
        let (sa, ca) = self.entries.get(a).ok_or_else(no_path)?;
        let (sb, cb) = self.entries.get(b).ok_or_else(no_path)?;
        if sa != sb {
            return Err(no_path());
        }
        Ok((ca.inverse().compose(cb), a.index.abs_diff(b.index) as usize))
    }
}

/// Closure `i → j` composed with odometry `j → i`.
pub fn odometry_check(lc: &LoopClosure, index: &OdometryIndex, th: &IcmThresholds) -> Result<CycleCheck, IcmError> {
    let (odom_ji, n) = index.path(&lc.to, &lc.from)?;
    Ok(CycleCheck::new(lc.measurement.compose(&odom_ji), n + 1, th))
}

/// Cycle `i → j → l → k → i` through closures `a = (i, j)` and `b = (k, l)`.
pub fn pairwise_error(a: &LoopClosure, b: &LoopClosure, index: &OdometryIndex, th: &IcmThresholds) -> Result<CycleCheck, IcmError> {
    let (odom_jl, n1) = index.path(&a.to, &b.to)?;
    let (odom_ki, n2) = index.path(&b.from, &a.from)?;
    let error = a.measurement.compose(&odom_jl).compose(&b.measurement.inverse()).compose(&odom_ki);
    Ok(CycleCheck::new(error, 2 + n1 + n2, th))
}

/// Pairwise check in a canonical orientation and order, so the verdict does
/// not depend on which closure arrived first.
pub fn pairwise_check(a: &LoopClosure, b: &LoopClosure, index: &OdometryIndex, th: &IcmThresholds) -> Result<CycleCheck, IcmError> {
    let (ca, cb) = (a.canonical(), b.canonical());
    let key = |c: &LoopClosure| (c.from, c.to);
    let (first, second) = if key(&cb) < key(&ca) { (cb, ca) } else { (ca, cb) };
    pairwise_error(&first, &second, index, th)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcmEntry {
    pub edge: EdgeId,
    pub closure: LoopClosure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum Verdict {
    /// Failed the odometry check; never added to the graph.
    RejectedOdometry { check: CycleCheck },
    /// Admitted to the matrix but outside the maximum clique.
    Outlier { edge: EdgeId },
    Inlier { edge: EdgeId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub verdict: Verdict,
    /// `None` when the closure spans two robots and has no odometric cycle.
    pub odometry_check: Option<CycleCheck>,
    pub entered: Vec<EdgeId>,
    pub left: Vec<EdgeId>,
}

impl SubmitOutcome {
    pub fn is_inlier(&self) -> bool {
        matches!(self.verdict, Verdict::Inlier { .. })
    }
}

/// Incremental outlier rejection state for one set of loop closures.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Icm {
    pub thresholds: IcmThresholds,
    entries: Vec<IcmEntry>,
    matrix: ConsistencyMatrix,
    inliers: BTreeSet<usize>,
    /// When false every closure that reaches the graph is kept active.
    pub enabled: bool,
}

impl Icm {
    pub fn new(thresholds: IcmThresholds) -> Self {
        Self { thresholds, enabled: true, ..Self::default() }
    }

    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn entries(&self) -> &[IcmEntry] {
        &self.entries
    }

    pub fn matrix(&self) -> &ConsistencyMatrix {
        &self.matrix
    }

    pub fn inlier_edges(&self) -> Vec<EdgeId> {
        self.inliers.iter().map(|&i| self.entries[i].edge).collect()
    }

    pub fn is_inlier(&self, edge: EdgeId) -> bool {
        self.inliers.iter().any(|&i| self.entries[i].edge == edge)
    }

    /// Runs the odometry check, adds the closure to `graph` if it passes,
    /// extends the matrix, recomputes the clique and updates active flags.
    pub fn submit(&mut self, graph: &mut PoseGraph, closure: LoopClosure, information: Mat6) -> Result<SubmitOutcome, IcmError> {
        let index = OdometryIndex::new(graph);
        let odometry = match odometry_check(&closure, &index, &self.thresholds) {
            Ok(c) => Some(c),
            // Closures between robots (or disconnected chains) have no
            // odometric cycle to test.
            Err(IcmError::NoOdometricPath(..)) => None,
            Err(e) => return Err(e),
        };
        if self.enabled {
            if let Some(check) = odometry.filter(|c| !c.pass) {
                return Ok(SubmitOutcome { verdict: Verdict::RejectedOdometry { check }, odometry_check: odometry, entered: vec![], left: vec![] });
            }
        }
        let edge = graph.add_loop_closure(closure.from, closure.to, closure.measurement, information)?;
        if !self.enabled {
            return Ok(SubmitOutcome { verdict: Verdict::Inlier { edge }, odometry_check: odometry, entered: vec![edge], left: vec![] });
        }
        let row: Vec<bool> = self
            .entries
            .iter()
            .map(|e| match pairwise_check(&e.closure, &closure, &index, &self.thresholds) {
                Ok(c) => c.pass,
                // Closures without a common cycle cannot contradict each other.
                Err(_) => true,
            })
            .collect();
        self.matrix.push(&row);
        self.entries.push(IcmEntry { edge, closure });
        let (entered, left) = self.update_inliers(graph)?;
        let verdict = if self.is_inlier(edge) { Verdict::Inlier { edge } } else { Verdict::Outlier { edge } };
        Ok(SubmitOutcome { verdict, odometry_check: odometry, entered, left })
    }

    /// Maximum clique with ties broken in canonical closure order rather than
    /// arrival order.
    fn canonical_clique(&self) -> BTreeSet<usize> {
        let key = |i: usize| {
            let c = self.entries[i].closure.canonical();
            (c.from, c.to, c.measurement.to_g2o().map(f64::to_bits))
        };
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by_key(|&i| (key(i), i));
        let permuted = ConsistencyMatrix::from_fn(order.len(), |a, b| self.matrix.get(order[a], order[b]));
        max_clique(&permuted).into_iter().map(|k| order[k]).collect()
    }

    fn update_inliers(&mut self, graph: &mut PoseGraph) -> Result<(Vec<EdgeId>, Vec<EdgeId>), IcmError> {
        let new = self.canonical_clique();
        let mut entered = Vec::new();
        let mut left = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let now = new.contains(&i);
            if now && !self.inliers.contains(&i) {
                entered.push(e.edge);
            }
            if !now && self.inliers.contains(&i) {
                left.push(e.edge);
            }
            graph.set_active(e.edge, now)?;
        }
        self.inliers = new;
        Ok((entered, left))
    }

    /// Re-derives the matrix and inlier set from scratch for the same
    /// closures (used after edits that change odometry).
    pub fn rebuild(&mut self, graph: &mut PoseGraph) -> Result<(), IcmError> {
        let index = OdometryIndex::new(graph);
        let th = self.thresholds;
        let closures: Vec<LoopClosure> = self.entries.iter().map(|e| e.closure).collect();
        self.matrix = ConsistencyMatrix::from_fn(closures.len(), |i, j| pairwise_check(&closures[j], &closures[i], &index, &th).map(|c| c.pass).unwrap_or(true));
        self.inliers.clear();
        self.update_inliers(graph)?;
        Ok(())
    }
}
