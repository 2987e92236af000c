//! Pose graph: robot poses, artifact and fiducial points, and typed edges.
//!
//! Records are append-only. Every mutation bumps the revision counter, and
//! each node and edge remembers the revision that created it and the one that
//! last modified it, which is what incremental transfer and `since` queries
//! key on.

pub mod g2o;
pub mod payload;

use crate::geometry::{Mat3, Mat6, Pose3, Vec3};
use nalgebra::SymmetricEigen;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Node namespace. Ordering is robots by id, then artifacts, then fiducials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Namespace {
    Robot(u16),
    Artifact,
    Fiducial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub namespace: Namespace,
    pub index: u32,
}

impl NodeId {
    pub const fn robot(robot: u16, index: u32) -> Self {
        Self { namespace: Namespace::Robot(robot), index }
    }

    pub const fn artifact(index: u32) -> Self {
        Self { namespace: Namespace::Artifact, index }
    }

    pub const fn fiducial(index: u32) -> Self {
        Self { namespace: Namespace::Fiducial, index }
    }

    pub fn robot_id(&self) -> Option<u16> {
        match self.namespace {
            Namespace::Robot(r) => Some(r),
            _ => None,
        }
    }

    pub fn is_pose(&self) -> bool {
        matches!(self.namespace, Namespace::Robot(_))
    }

    /// Next pose of the same robot.
    pub fn next(&self) -> Self {
        Self { namespace: self.namespace, index: self.index + 1 }
    }

    /// Consecutive poses of one robot.
    pub fn is_successor_of(&self, other: &NodeId) -> bool {
        self.is_pose() && self.namespace == other.namespace && other.index.checked_add(1) == Some(self.index)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.namespace {
            Namespace::Robot(r) => write!(f, "robot{r}/{}", self.index),
            Namespace::Artifact => write!(f, "artifact/{}", self.index),
            Namespace::Fiducial => write!(f, "fiducial/{}", self.index),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid node id '{0}'")]
pub struct NodeIdParseError(pub String);

impl FromStr for NodeId {
    type Err = NodeIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || NodeIdParseError(s.to_string());
        let (ns, idx) = s.split_once('/').ok_or_else(err)?;
        let index: u32 = idx.parse().map_err(|_| err())?;
        let namespace = match ns {
            "artifact" => Namespace::Artifact,
            "fiducial" => Namespace::Fiducial,
            _ => Namespace::Robot(ns.strip_prefix("robot").ok_or_else(err)?.parse().map_err(|_| err())?),
        };
        Ok(NodeId { namespace, index })
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeValue {
    Pose(Pose3),
    Point(Vec3),
}

impl NodeValue {
    fn is_finite(&self) -> bool {
        match self {
            NodeValue::Pose(p) => p.translation.iter().chain(p.rotation.matrix().iter()).all(|v| v.is_finite()),
            NodeValue::Point(p) => p.iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub value: NodeValue,
    pub created: u64,
    pub modified: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    LoopClosure,
    ArtifactObservation,
    PriorPose,
    PriorPoint,
}

/// Measurement model of an edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Factor {
    /// Relative pose `inverse(T_from)·T_to`; information in (rotation, translation) order.
    Between { from: NodeId, to: NodeId, measurement: Pose3, information: Mat6 },
    /// Point position expressed in the observing pose's frame.
    Observation { pose: NodeId, point: NodeId, measurement: Vec3, information: Mat3 },
    PosePrior { node: NodeId, measurement: Pose3, information: Mat6 },
    PointPrior { node: NodeId, measurement: Vec3, information: Mat3 },
}

impl Factor {
    pub fn nodes(&self) -> (NodeId, Option<NodeId>) {
        match self {
            Factor::Between { from, to, .. } => (*from, Some(*to)),
            Factor::Observation { pose, point, .. } => (*pose, Some(*point)),
            Factor::PosePrior { node, .. } | Factor::PointPrior { node, .. } => (*node, None),
        }
    }
}

pub type EdgeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    pub factor: Factor,
    /// Inactive edges stay in the graph but are ignored by the optimizer.
    pub active: bool,
    pub created: u64,
    pub modified: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("duplicate {kind:?} edge between {from} and {to:?}")]
    DuplicateEdge { kind: EdgeKind, from: NodeId, to: Option<NodeId> },
    #[error("invalid edge: {0}")]
    InvalidEdge(String),
    #[error("non-finite estimate for node {0}")]
    NonFinite(NodeId),
    #[error("unknown edge {0}")]
    UnknownEdge(EdgeId),
}

/// Information for an odometry or loop-closure edge from per-axis standard deviations.
pub fn diagonal_information(rotation_sigma: f64, translation_sigma: f64) -> Mat6 {
    let r = rotation_sigma.powi(-2);
    let t = translation_sigma.powi(-2);
    Mat6::from_diagonal(&crate::Vec6::new(r, r, r, t, t, t))
}

pub fn isotropic_information3(sigma: f64) -> Mat3 {
    Mat3::identity() * sigma.powi(-2)
}

/// Default standard deviations for scan-matching edges: 0.02 rad and 0.1 m.
pub const ODOMETRY_ROTATION_SIGMA: f64 = 0.02;
pub const ODOMETRY_TRANSLATION_SIGMA: f64 = 0.1;
/// Translation standard deviation for edges spanning degenerate scan matches.
pub const DEGENERATE_TRANSLATION_SIGMA: f64 = 10.0;
pub const ARTIFACT_SIGMA: f64 = 0.3;
pub const FIDUCIAL_SIGMA: f64 = 0.01;

pub fn odometry_information() -> Mat6 {
    diagonal_information(ODOMETRY_ROTATION_SIGMA, ODOMETRY_TRANSLATION_SIGMA)
}

/// Odometry information when a scan match along the edge was degenerate.
pub fn degenerate_odometry_information() -> Mat6 {
    diagonal_information(ODOMETRY_ROTATION_SIGMA, DEGENERATE_TRANSLATION_SIGMA)
}

fn check_psd<const N: usize>(m: &nalgebra::SMatrix<f64, N, N>) -> Result<(), GraphError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GraphError::InvalidEdge("non-finite information".into()));
    }
    let scale = m.abs().max().max(1.0);
    if (m - m.transpose()).abs().max() > 1e-9 * scale {
        return Err(GraphError::InvalidEdge("information not symmetric".into()));
    }
    let eig = SymmetricEigen::new(nalgebra::DMatrix::from_column_slice(N, N, m.as_slice()));
    if eig.eigenvalues.min() < -1e-9 * scale {
        return Err(GraphError::InvalidEdge("information not positive semidefinite".into()));
    }
    Ok(())
}

fn pose_finite(p: &Pose3) -> bool {
    NodeValue::Pose(*p).is_finite()
}

/// Pose graph with a monotone revision counter.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PoseGraph {
    nodes: BTreeMap<NodeId, Node>,
    edges: Vec<Edge>,
    revision: u64,
}

/// Two graphs are equal when their node values and edge contents match;
/// revision bookkeeping is ignored.
impl PartialEq for PoseGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|((a, na), (b, nb))| a == b && na.value == nb.value)
            && self.edges.len() == other.edges.len()
            && self
                .edges
                .iter()
                .zip(&other.edges)
                .all(|(a, b)| a.kind == b.kind && a.factor == b.factor && a.active == b.active)
    }
}

fn pose_close(a: &Pose3, b: &Pose3, tol: f64) -> bool {
    a.translation == b.translation && (a.rotation.matrix() - b.rotation.matrix()).abs().max() <= tol
}

fn factor_close(a: &Factor, b: &Factor, tol: f64) -> bool {
    match (a, b) {
        (
            Factor::Between { from: fa, to: ta, measurement: ma, information: ia },
            Factor::Between { from: fb, to: tb, measurement: mb, information: ib },
        ) => fa == fb && ta == tb && ia == ib && pose_close(ma, mb, tol),
        (Factor::PosePrior { node: na, measurement: ma, information: ia }, Factor::PosePrior { node: nb, measurement: mb, information: ib }) => {
            na == nb && ia == ib && pose_close(ma, mb, tol)
        }
        _ => a == b,
    }
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Equality with rotation matrices compared to within `tol`. Quaternion
    /// text round trips cannot reproduce every rotation matrix bit for bit;
    /// all other fields must match exactly.
    pub fn approx_eq(&self, other: &PoseGraph, tol: f64) -> bool {
        self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|((a, na), (b, nb))| {
                a == b
                    && match (&na.value, &nb.value) {
                        (NodeValue::Pose(x), NodeValue::Pose(y)) => pose_close(x, y, tol),
                        (x, y) => x == y,
                    }
            })
            && self.edges.len() == other.edges.len()
            && self
                .edges
                .iter()
                .zip(&other.edges)
                .all(|(a, b)| a.kind == b.kind && a.active == b.active && factor_close(&a.factor, &b.factor, tol))
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    fn bump(&mut self) -> u64 {
        self.revision += 1;
        self.revision
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, &Node)> {
        self.nodes.iter()
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn pose(&self, id: &NodeId) -> Option<Pose3> {
        match self.nodes.get(id)?.value {
            NodeValue::Pose(p) => Some(p),
            NodeValue::Point(_) => None,
        }
    }

    pub fn point(&self, id: &NodeId) -> Option<Vec3> {
        match self.nodes.get(id)?.value {
            NodeValue::Point(p) => Some(p),
            NodeValue::Pose(_) => None,
        }
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> Option<&Edge> {
        self.edges.get(id)
    }

    pub fn robots(&self) -> BTreeSet<u16> {
        self.nodes.keys().filter_map(NodeId::robot_id).collect()
    }

    /// Poses of one robot in index order.
    pub fn robot_poses(&self, robot: u16) -> Vec<(NodeId, Pose3)> {
        let lo = NodeId::robot(robot, 0);
        let hi = NodeId::robot(robot, u32::MAX);
        self.nodes
            .range(lo..=hi)
            .filter_map(|(id, n)| match n.value {
                NodeValue::Pose(p) => Some((*id, p)),
                NodeValue::Point(_) => None,
            })
            .collect()
    }

    pub fn points(&self) -> Vec<(NodeId, Vec3)> {
        self.nodes
            .iter()
            .filter_map(|(id, n)| match n.value {
                NodeValue::Point(p) => Some((*id, p)),
                NodeValue::Pose(_) => None,
            })
            .collect()
    }

    fn insert_node(&mut self, id: NodeId, value: NodeValue) -> Result<u64, GraphError> {
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateNode(id));
        }
        if !value.is_finite() {
            return Err(GraphError::NonFinite(id));
        }
        match (&value, id.is_pose()) {
            (NodeValue::Pose(_), false) => return Err(GraphError::InvalidEdge(format!("{id} cannot hold a pose"))),
            (NodeValue::Point(_), true) => return Err(GraphError::InvalidEdge(format!("{id} cannot hold a point"))),
            _ => {}
        }
        let rev = self.bump();
        self.nodes.insert(id, Node { value, created: rev, modified: rev });
        Ok(rev)
    }

    pub fn add_pose(&mut self, id: NodeId, pose: Pose3) -> Result<u64, GraphError> {
        self.insert_node(id, NodeValue::Pose(pose))
    }

    pub fn add_point(&mut self, id: NodeId, point: Vec3) -> Result<u64, GraphError> {
        self.insert_node(id, NodeValue::Point(point))
    }

    fn require_pose(&self, id: &NodeId) -> Result<(), GraphError> {
        match self.nodes.get(id) {
            Some(Node { value: NodeValue::Pose(_), .. }) => Ok(()),
            Some(_) => Err(GraphError::InvalidEdge(format!("{id} is not a pose node"))),
            None => Err(GraphError::UnknownNode(*id)),
        }
    }

    fn require_point(&self, id: &NodeId) -> Result<(), GraphError> {
        match self.nodes.get(id) {
            Some(Node { value: NodeValue::Point(_), .. }) => Ok(()),
            Some(_) => Err(GraphError::InvalidEdge(format!("{id} is not a point node"))),
            None => Err(GraphError::UnknownNode(*id)),
        }
    }

    fn push_edge(&mut self, kind: EdgeKind, factor: Factor) -> Result<EdgeId, GraphError> {
        if self.edges.iter().any(|e| e.kind == kind && e.factor == factor) {
            let (from, to) = factor.nodes();
            return Err(GraphError::DuplicateEdge { kind, from, to });
        }
        let rev = self.bump();
        self.edges.push(Edge { kind, factor, active: true, created: rev, modified: rev });
        Ok(self.edges.len() - 1)
    }

    fn between(&mut self, kind: EdgeKind, from: NodeId, to: NodeId, measurement: Pose3, information: Mat6) -> Result<EdgeId, GraphError> {
        self.require_pose(&from)?;
        self.require_pose(&to)?;
        if from == to {
            return Err(GraphError::InvalidEdge(format!("self edge on {from}")));
        }
        if !pose_finite(&measurement) {
            return Err(GraphError::InvalidEdge("non-finite measurement".into()));
        }
        check_psd(&information)?;
        self.push_edge(kind, Factor::Between { from, to, measurement, information })
    }

    /// Odometry between consecutive poses of one robot.
    pub fn add_odometry(&mut self, from: NodeId, to: NodeId, measurement: Pose3, information: Mat6) -> Result<EdgeId, GraphError> {
        if !to.is_successor_of(&from) {
            return Err(GraphError::InvalidEdge(format!("odometry {from} -> {to} is not between consecutive poses")));
        }
        self.between(EdgeKind::Odometry, from, to, measurement, information)
    }

    /// Loop closure between poses of one or two robots. A forward link between
    /// consecutive poses is odometry and is rejected here.
    pub fn add_loop_closure(&mut self, from: NodeId, to: NodeId, measurement: Pose3, information: Mat6) -> Result<EdgeId, GraphError> {
        if to.is_successor_of(&from) {
            return Err(GraphError::InvalidEdge(format!("loop closure {from} -> {to} duplicates an odometry link")));
        }
        self.between(EdgeKind::LoopClosure, from, to, measurement, information)
    }

    /// Adds an artifact observation, creating the artifact node at `T_pose·z`
    /// on its first sighting.
    pub fn add_artifact_observation(&mut self, pose: NodeId, artifact: NodeId, measurement: Vec3, information: Mat3) -> Result<EdgeId, GraphError> {
        self.require_pose(&pose)?;
        if artifact.is_pose() {
            return Err(GraphError::InvalidEdge(format!("{artifact} is not a point node")));
        }
        if !measurement.iter().all(|v| v.is_finite()) {
            return Err(GraphError::InvalidEdge("non-finite measurement".into()));
        }
        check_psd(&information)?;
        let factor = Factor::Observation { pose, point: artifact, measurement, information };
        if self.edges.iter().any(|e| e.kind == EdgeKind::ArtifactObservation && e.factor == factor) {
            return Err(GraphError::DuplicateEdge { kind: EdgeKind::ArtifactObservation, from: pose, to: Some(artifact) });
        }
        if !self.nodes.contains_key(&artifact) {
            let t = self.pose(&pose).expect("checked");
            self.add_point(artifact, t.transform_point(&measurement))?;
        } else {
            self.require_point(&artifact)?;
        }
        self.push_edge(EdgeKind::ArtifactObservation, factor)
    }

    pub fn add_pose_prior(&mut self, node: NodeId, measurement: Pose3, information: Mat6) -> Result<EdgeId, GraphError> {
        self.require_pose(&node)?;
        if !pose_finite(&measurement) {
            return Err(GraphError::InvalidEdge("non-finite measurement".into()));
        }
        check_psd(&information)?;
        self.push_edge(EdgeKind::PriorPose, Factor::PosePrior { node, measurement, information })
    }

    pub fn add_point_prior(&mut self, node: NodeId, measurement: Vec3, information: Mat3) -> Result<EdgeId, GraphError> {
        self.require_point(&node)?;
        if !measurement.iter().all(|v| v.is_finite()) {
            return Err(GraphError::InvalidEdge("non-finite measurement".into()));
        }
        check_psd(&information)?;
        self.push_edge(EdgeKind::PriorPoint, Factor::PointPrior { node, measurement, information })
    }

    /// Adds a fiducial at a surveyed location with a tight point prior.
    pub fn add_fiducial(&mut self, index: u32, position: Vec3) -> Result<EdgeId, GraphError> {
        let id = NodeId::fiducial(index);
        self.add_point(id, position)?;
        self.add_point_prior(id, position, isotropic_information3(FIDUCIAL_SIGMA))
    }

    /// Activates or deactivates an edge. Unchanged flags are not a mutation.
    pub fn set_active(&mut self, edge: EdgeId, active: bool) -> Result<u64, GraphError> {
        if edge >= self.edges.len() {
            return Err(GraphError::UnknownEdge(edge));
        }
        if self.edges[edge].active != active {
            let rev = self.bump();
            let e = &mut self.edges[edge];
            e.active = active;
            e.modified = rev;
        }
        Ok(self.revision)
    }

    /// Replaces node estimates in one revision. Ids must exist and keep their kind.
    pub fn set_estimates<'a, I>(&mut self, values: I) -> Result<u64, GraphError>
    where
        I: IntoIterator<Item = (&'a NodeId, &'a NodeValue)>,
    {
        let values: Vec<(NodeId, NodeValue)> = values.into_iter().map(|(k, v)| (*k, *v)).collect();
        for (id, v) in &values {
            let node = self.nodes.get(id).ok_or(GraphError::UnknownNode(*id))?;
            if std::mem::discriminant(&node.value) != std::mem::discriminant(v) {
                return Err(GraphError::InvalidEdge(format!("estimate kind mismatch for {id}")));
            }
            if !v.is_finite() {
                return Err(GraphError::NonFinite(*id));
            }
        }
        if values.is_empty() {
            return Ok(self.revision);
        }
        let rev = self.bump();
        for (id, v) in values {
            let node = self.nodes.get_mut(&id).expect("checked");
            node.value = v;
            node.modified = rev;
        }
        Ok(rev)
    }

    pub fn set_pose(&mut self, id: NodeId, pose: Pose3) -> Result<u64, GraphError> {
        self.set_estimates([(&id, &NodeValue::Pose(pose))])
    }

    /// All node estimates, keyed by id.
    pub fn estimates(&self) -> BTreeMap<NodeId, NodeValue> {
        self.nodes.iter().map(|(k, n)| (*k, n.value)).collect()
    }

    /// Edges of the given kind with their ids.
    pub fn edges_of_kind(&self, kind: EdgeKind) -> impl Iterator<Item = (EdgeId, &Edge)> {
        self.edges.iter().enumerate().filter(move |(_, e)| e.kind == kind)
    }

    pub fn active_edges(&self) -> impl Iterator<Item = (EdgeId, &Edge)> {
        self.edges.iter().enumerate().filter(|(_, e)| e.active)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: u32) -> PoseGraph {
        let mut g = PoseGraph::new();
        for i in 0..n {
            g.add_pose(NodeId::robot(0, i), Pose3::from_xyz_yaw(i as f64, 0.0, 0.0, 0.0)).unwrap();
        }
        for i in 1..n {
            g.add_odometry(NodeId::robot(0, i - 1), NodeId::robot(0, i), Pose3::from_xyz_yaw(1.0, 0.0, 0.0, 0.0), odometry_information()).unwrap();
        }
        g
    }

    #[test]
    fn node_id_text_form() {
        for id in [NodeId::robot(3, 42), NodeId::artifact(7), NodeId::fiducial(0)] {
            assert_eq!(id.to_string().parse::<NodeId>().unwrap(), id);
        }
        assert_eq!(NodeId::robot(1, 2).to_string(), "robot1/2");
        assert!("robotx/1".parse::<NodeId>().is_err());
        assert!("artifact".parse::<NodeId>().is_err());
        assert_eq!(serde_json::to_string(&NodeId::artifact(4)).unwrap(), "\"artifact/4\"");
    }

    #[test]
    fn artifact_first_and_second_observation() {
        let mut g = chain(3);
        let a = NodeId::artifact(0);
        let nodes = g.node_count();
        g.add_artifact_observation(NodeId::robot(0, 0), a, Vec3::new(1.0, 2.0, 0.0), isotropic_information3(0.3)).unwrap();
        assert_eq!(g.node_count(), nodes + 1);
        assert_eq!(g.point(&a).unwrap(), Vec3::new(1.0, 2.0, 0.0));
        let edges = g.edge_count();
        g.add_artifact_observation(NodeId::robot(0, 2), a, Vec3::new(-1.0, 2.0, 0.0), isotropic_information3(0.3)).unwrap();
        assert_eq!(g.node_count(), nodes + 1);
        assert_eq!(g.edge_count(), edges + 1);
    }

    #[test]
    fn unknown_node_and_duplicates() {
        let mut g = chain(3);
        let r = g.add_loop_closure(NodeId::robot(0, 0), NodeId::robot(0, 9), Pose3::identity(), odometry_information());
        assert_eq!(r, Err(GraphError::UnknownNode(NodeId::robot(0, 9))));
        let z = Pose3::from_xyz_yaw(2.0, 0.0, 0.0, 0.0);
        g.add_loop_closure(NodeId::robot(0, 0), NodeId::robot(0, 2), z, odometry_information()).unwrap();
        assert!(matches!(
            g.add_loop_closure(NodeId::robot(0, 0), NodeId::robot(0, 2), z, odometry_information()),
            Err(GraphError::DuplicateEdge { .. })
        ));
        let z2 = Pose3::from_xyz_yaw(2.01, 0.0, 0.0, 0.0);
        g.add_loop_closure(NodeId::robot(0, 0), NodeId::robot(0, 2), z2, odometry_information()).unwrap();
    }

    #[test]
    fn edge_kind_constraints() {
        let mut g = chain(3);
        assert!(g.add_odometry(NodeId::robot(0, 0), NodeId::robot(0, 2), Pose3::identity(), odometry_information()).is_err());
        assert!(g.add_loop_closure(NodeId::robot(0, 1), NodeId::robot(0, 2), Pose3::identity(), odometry_information()).is_err());
        let mut bad = odometry_information();
        bad[(0, 0)] = -1.0;
        assert!(matches!(
            g.add_pose_prior(NodeId::robot(0, 0), Pose3::identity(), bad),
            Err(GraphError::InvalidEdge(_))
        ));
    }

    #[test]
    fn revision_strictly_increases() {
        let mut g = PoseGraph::new();
        let mut last = g.revision();
        let mut check = |g: &PoseGraph| {
            assert!(g.revision() > last);
            last = g.revision();
        };
        g.add_pose(NodeId::robot(0, 0), Pose3::identity()).unwrap();
        check(&g);
        g.add_pose(NodeId::robot(0, 1), Pose3::identity()).unwrap();
        check(&g);
        let e = g.add_odometry(NodeId::robot(0, 0), NodeId::robot(0, 1), Pose3::identity(), odometry_information()).unwrap();
        check(&g);
        g.set_active(e, false).unwrap();
        check(&g);
        g.set_pose(NodeId::robot(0, 1), Pose3::from_xyz_yaw(1.0, 0.0, 0.0, 0.0)).unwrap();
        check(&g);
        let r = g.revision();
        g.set_active(e, false).unwrap();
        assert_eq!(g.revision(), r);
    }

    #[test]
    fn robot_poses_are_ordered_and_scoped() {
        let mut g = chain(4);
        g.add_pose(NodeId::robot(1, 0), Pose3::identity()).unwrap();
        let ids: Vec<u32> = g.robot_poses(0).into_iter().map(|(id, _)| id.index).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(g.robots().into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }
}
