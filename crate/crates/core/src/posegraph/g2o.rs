//! g2o text format.
//!
//! One record per line, whitespace separated, `#` starts a comment line.
//!
//! ```text
//! VERTEX_SE3:QUAT      id x y z qx qy qz qw
//! VERTEX_TRACKXYZ      id x y z
//! EDGE_SE3:QUAT        from to x y z qx qy qz qw  I11 I12 .. I16 I22 .. I66
//! EDGE_SE3_TRACKXYZ    pose point x y z  I11 I12 I13 I22 I23 I33
//! EDGE_SE3_PRIOR       id x y z qx qy qz qw  I11 .. I66
//! EDGE_POINTXYZ_PRIOR  id x y z  I11 I12 I13 I22 I23 I33
//! EDGE_ACTIVE          ordinal 0|1
//! ```
//!
//! Information matrices are written as their upper triangle, row major. For
//! 6×6 blocks the axis order is `x y z rx ry rz` (translation first), as in
//! standard g2o files; internally the rotation block comes first.
//!
//! Integer ids encode the node namespace: robot `r`, pose `i` is
//! `r·10⁷ + i`; artifact `i` is `10¹² + i`; fiducial `i` is `2·10¹² + i`.
//! Plain benchmark files with small ids therefore load as robot 0.
//!
//! `EDGE_SE3:QUAT` between consecutive poses of one robot (`to = from + 1`)
//! loads as odometry, any other as a loop closure. `EDGE_ACTIVE` sets the
//! active flag of the edge with the given zero-based ordinal among all edge
//! records of the graph.

use super::{EdgeKind, Factor, GraphError, Namespace, NodeId, NodeValue, PoseGraph};
use crate::geometry::{Mat3, Mat6, Pose3, Vec3};
use std::fmt::Write as _;
use thiserror::Error;

pub const HEADER: &str = "# lamp pose graph";

const ROBOT_STRIDE: u64 = 10_000_000;
const ARTIFACT_BASE: u64 = 1_000_000_000_000;
const FIDUCIAL_BASE: u64 = 2_000_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum G2oError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Graph { line: usize, source: GraphError },
}

impl G2oError {
    pub fn line(&self) -> usize {
        match self {
            G2oError::Parse { line, .. } | G2oError::Graph { line, .. } => *line,
        }
    }
}

pub fn encode_id(id: &NodeId) -> u64 {
    match id.namespace {
        Namespace::Robot(r) => r as u64 * ROBOT_STRIDE + id.index as u64,
        Namespace::Artifact => ARTIFACT_BASE + id.index as u64,
        Namespace::Fiducial => FIDUCIAL_BASE + id.index as u64,
    }
}

pub fn decode_id(v: u64) -> Option<NodeId> {
    if v >= FIDUCIAL_BASE {
        u32::try_from(v - FIDUCIAL_BASE).ok().map(NodeId::fiducial)
    } else if v >= ARTIFACT_BASE {
        u32::try_from(v - ARTIFACT_BASE).ok().map(NodeId::artifact)
    } else {
        let r = u16::try_from(v / ROBOT_STRIDE).ok()?;
        Some(NodeId::robot(r, (v % ROBOT_STRIDE) as u32))
    }
}

/// One line of a g2o file.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Vertex(NodeId, NodeValue),
    Edge(EdgeKind, Factor),
    Active { ordinal: usize, active: bool },
}

/// g2o axis order (translation first) to internal index.
const PERM: [usize; 6] = [3, 4, 5, 0, 1, 2];

fn write_info6(out: &mut String, m: &Mat6) {
    for r in 0..6 {
        for c in r..6 {
            let _ = write!(out, " {}", m[(PERM[r], PERM[c])]);
        }
    }
}

fn write_info3(out: &mut String, m: &Mat3) {
    for r in 0..3 {
        for c in r..3 {
            let _ = write!(out, " {}", m[(r, c)]);
        }
    }
}

fn write_pose(out: &mut String, p: &Pose3) {
    for v in p.to_g2o() {
        let _ = write!(out, " {v}");
    }
}

fn write_vec(out: &mut String, p: &Vec3) {
    let _ = write!(out, " {} {} {}", p.x, p.y, p.z);
}

pub fn write_record(out: &mut String, record: &Record) {
    match record {
        Record::Vertex(id, NodeValue::Pose(p)) => {
            let _ = write!(out, "VERTEX_SE3:QUAT {}", encode_id(id));
            write_pose(out, p);
        }
        Record::Vertex(id, NodeValue::Point(p)) => {
            let _ = write!(out, "VERTEX_TRACKXYZ {}", encode_id(id));
            write_vec(out, p);
        }
        Record::Edge(_, Factor::Between { from, to, measurement, information }) => {
            let _ = write!(out, "EDGE_SE3:QUAT {} {}", encode_id(from), encode_id(to));
            write_pose(out, measurement);
            write_info6(out, information);
        }
        Record::Edge(_, Factor::Observation { pose, point, measurement, information }) => {
            let _ = write!(out, "EDGE_SE3_TRACKXYZ {} {}", encode_id(pose), encode_id(point));
            write_vec(out, measurement);
            write_info3(out, information);
        }
        Record::Edge(_, Factor::PosePrior { node, measurement, information }) => {
            let _ = write!(out, "EDGE_SE3_PRIOR {}", encode_id(node));
            write_pose(out, measurement);
            write_info6(out, information);
        }
        Record::Edge(_, Factor::PointPrior { node, measurement, information }) => {
            let _ = write!(out, "EDGE_POINTXYZ_PRIOR {}", encode_id(node));
            write_vec(out, measurement);
            write_info3(out, information);
        }
        Record::Active { ordinal, active } => {
            let _ = write!(out, "EDGE_ACTIVE {ordinal} {}", u8::from(*active));
        }
    }
    out.push('\n');
}

pub fn write_records(records: &[Record]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in records {
        write_record(&mut out, r);
    }
    out
}

/// Records that rebuild `graph`: vertices in id order, edges in insertion
/// order, then the inactive flags.
pub fn graph_records(graph: &PoseGraph) -> Vec<Record> {
    let mut records: Vec<Record> = graph.nodes().map(|(id, n)| Record::Vertex(*id, n.value)).collect();
    records.extend(graph.edges().iter().map(|e| Record::Edge(e.kind, e.factor.clone())));
    records.extend(
        graph
            .edges()
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.active)
            .map(|(ordinal, _)| Record::Active { ordinal, active: false }),
    );
    records
}

pub fn write_g2o(graph: &PoseGraph) -> String {
    write_records(&graph_records(graph))
}

struct Fields<'a> {
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn err(&self, message: impl Into<String>) -> G2oError {
        G2oError::Parse { line: self.line, message: message.into() }
    }

    fn next(&mut self, what: &str) -> Result<&'a str, G2oError> {
        self.tokens.next().ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn float(&mut self, what: &str) -> Result<f64, G2oError> {
        let t = self.next(what)?;
        let v: f64 = t.parse().map_err(|_| self.err(format!("bad number '{t}' for {what}")))?;
        if !v.is_finite() {
            return Err(self.err(format!("non-finite {what}")));
        }
        Ok(v)
    }

    fn id(&mut self) -> Result<NodeId, G2oError> {
        let t = self.next("id")?;
        let v: u64 = t.parse().map_err(|_| self.err(format!("bad id '{t}'")))?;
        decode_id(v).ok_or_else(|| self.err(format!("id {v} out of range")))
    }

    fn pose_id(&mut self) -> Result<NodeId, G2oError> {
        let id = self.id()?;
        if !id.is_pose() {
            return Err(self.err(format!("{id} is not a pose id")));
        }
        Ok(id)
    }

    fn point_id(&mut self) -> Result<NodeId, G2oError> {
        let id = self.id()?;
        if id.is_pose() {
            return Err(self.err(format!("{id} is not a point id")));
        }
        Ok(id)
    }

    fn pose(&mut self) -> Result<Pose3, G2oError> {
        let mut v = [0.0; 7];
        for x in &mut v {
            *x = self.float("pose")?;
        }
        let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
        if qn < 1e-9 {
            return Err(self.err("zero quaternion"));
        }
        Ok(Pose3::from_g2o(&v))
    }

    fn vec3(&mut self) -> Result<Vec3, G2oError> {
        Ok(Vec3::new(self.float("x")?, self.float("y")?, self.float("z")?))
    }

    fn info6(&mut self) -> Result<Mat6, G2oError> {
        let mut m = Mat6::zeros();
        for r in 0..6 {
            for c in r..6 {
                let v = self.float("information")?;
                m[(PERM[r], PERM[c])] = v;
                m[(PERM[c], PERM[r])] = v;
            }
        }
        Ok(m)
    }

    fn info3(&mut self) -> Result<Mat3, G2oError> {
        let mut m = Mat3::zeros();
        for r in 0..3 {
            for c in r..3 {
                let v = self.float("information")?;
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
        }
        Ok(m)
    }

    fn finish(mut self) -> Result<(), G2oError> {
        match self.tokens.next() {
            Some(t) => Err(self.err(format!("unexpected trailing field '{t}'"))),
            None => Ok(()),
        }
    }
}

/// Parses records with their 1-based line numbers.
pub fn parse_records(text: &str) -> Result<Vec<(usize, Record)>, G2oError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let tag = tokens.next().expect("non-empty");
        let mut f = Fields { line, tokens };
        let record = match tag {
            "VERTEX_SE3:QUAT" => {
                let id = f.pose_id()?;
                Record::Vertex(id, NodeValue::Pose(f.pose()?))
            }
            "VERTEX_TRACKXYZ" => {
                let id = f.point_id()?;
                Record::Vertex(id, NodeValue::Point(f.vec3()?))
            }
            "EDGE_SE3:QUAT" => {
                let from = f.pose_id()?;
                let to = f.pose_id()?;
                let measurement = f.pose()?;
                let information = f.info6()?;
                let kind = if to.is_successor_of(&from) { EdgeKind::Odometry } else { EdgeKind::LoopClosure };
                Record::Edge(kind, Factor::Between { from, to, measurement, information })
            }
            "EDGE_SE3_TRACKXYZ" => {
                let pose = f.pose_id()?;
                let point = f.point_id()?;
                let measurement = f.vec3()?;
                let information = f.info3()?;
                Record::Edge(EdgeKind::ArtifactObservation, Factor::Observation { pose, point, measurement, information })
            }
            "EDGE_SE3_PRIOR" => {
                let node = f.pose_id()?;
                let measurement = f.pose()?;
                let information = f.info6()?;
                Record::Edge(EdgeKind::PriorPose, Factor::PosePrior { node, measurement, information })
            }
            "EDGE_POINTXYZ_PRIOR" => {
                let node = f.point_id()?;
                let measurement = f.vec3()?;
                let information = f.info3()?;
                Record::Edge(EdgeKind::PriorPoint, Factor::PointPrior { node, measurement, information })
            }
            "EDGE_ACTIVE" => {
                let t = f.next("ordinal")?;
                let ordinal = t.parse().map_err(|_| f.err(format!("bad ordinal '{t}'")))?;
                let active = match f.next("flag")? {
                    "0" => false,
                    "1" => true,
                    other => return Err(f.err(format!("bad flag '{other}'"))),
                };
                Record::Active { ordinal, active }
            }
            other => return Err(f.err(format!("unknown record '{other}'"))),
        };
        f.finish()?;
        out.push((line, record));
    }
    Ok(out)
}

/// Applies one record. `edge_ordinal` maps an `EDGE_ACTIVE` ordinal to an
/// edge of `graph`.
pub fn apply_record(
    graph: &mut PoseGraph,
    record: &Record,
    edge_ordinal: impl Fn(usize) -> Option<usize>,
) -> Result<Option<usize>, GraphError> {
    match record {
        Record::Vertex(id, NodeValue::Pose(p)) => graph.add_pose(*id, *p).map(|_| None),
        Record::Vertex(id, NodeValue::Point(p)) => graph.add_point(*id, *p).map(|_| None),
        Record::Edge(kind, factor) => {
            let id = match (kind, factor.clone()) {
                (EdgeKind::Odometry, Factor::Between { from, to, measurement, information }) => {
                    graph.add_odometry(from, to, measurement, information)?
                }
                (EdgeKind::LoopClosure, Factor::Between { from, to, measurement, information }) => {
                    graph.add_loop_closure(from, to, measurement, information)?
                }
                (EdgeKind::ArtifactObservation, Factor::Observation { pose, point, measurement, information }) => {
                    graph.add_artifact_observation(pose, point, measurement, information)?
                }
                (EdgeKind::PriorPose, Factor::PosePrior { node, measurement, information }) => {
                    graph.add_pose_prior(node, measurement, information)?
                }
                (EdgeKind::PriorPoint, Factor::PointPrior { node, measurement, information }) => {
                    graph.add_point_prior(node, measurement, information)?
                }
                (kind, _) => return Err(GraphError::InvalidEdge(format!("factor does not match kind {kind:?}"))),
            };
            Ok(Some(id))
        }
        Record::Active { ordinal, active } => {
            let edge = edge_ordinal(*ordinal).ok_or(GraphError::UnknownEdge(*ordinal))?;
            graph.set_active(edge, *active).map(|_| None)
        }
    }
}

pub fn read_g2o(text: &str) -> Result<PoseGraph, G2oError> {
    let mut graph = PoseGraph::new();
    for (line, record) in parse_records(text)? {
        let edges = graph.edge_count();
        apply_record(&mut graph, &record, |o| (o < edges).then_some(o)).map_err(|source| G2oError::Graph { line, source })?;
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rot3;
    use crate::posegraph::{isotropic_information3, odometry_information};
    use proptest::prelude::*;

    fn rotation_close(a: &Pose3, b: &Pose3) -> bool {
        (a.rotation.matrix() - b.rotation.matrix()).abs().max() <= 1e-12 && a.translation == b.translation
    }

    #[test]
    fn empty_graph_is_header_only() {
        let text = write_g2o(&PoseGraph::new());
        assert_eq!(text, format!("{HEADER}\n"));
        assert!(read_g2o(&text).unwrap().is_empty());
    }

    #[test]
    fn chain_with_loop_closure_round_trips() {
        let mut g = PoseGraph::new();
        let ids: Vec<NodeId> = (0..3).map(|i| NodeId::robot(0, i)).collect();
        for (i, id) in ids.iter().enumerate() {
            g.add_pose(*id, Pose3::from_xyz_yaw(i as f64, 0.5, 0.0, 0.0)).unwrap();
        }
        g.add_odometry(ids[0], ids[1], Pose3::from_xyz_yaw(1.0, 0.0, 0.0, 0.0), odometry_information()).unwrap();
        g.add_odometry(ids[1], ids[2], Pose3::from_xyz_yaw(1.0, 0.0, 0.0, 0.0), odometry_information()).unwrap();
        g.add_loop_closure(ids[0], ids[2], Pose3::from_xyz_yaw(2.0, 0.0, 0.0, 0.0), odometry_information()).unwrap();
        let text = write_g2o(&g);
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body.len(), 6);
        let back = read_g2o(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.edges()[2].kind, EdgeKind::LoopClosure);
    }

    #[test]
    fn information_axis_order() {
        let mut info = Mat6::zeros();
        for i in 0..6 {
            info[(i, i)] = (i + 1) as f64;
        }
        info[(0, 3)] = 0.5;
        info[(3, 0)] = 0.5;
        let mut g = PoseGraph::new();
        g.add_pose(NodeId::robot(0, 0), Pose3::identity()).unwrap();
        g.add_pose_prior(NodeId::robot(0, 0), Pose3::identity(), info).unwrap();
        let text = write_g2o(&g);
        let line = text.lines().find(|l| l.starts_with("EDGE_SE3_PRIOR")).unwrap();
        let vals: Vec<f64> = line.split_whitespace().skip(9).map(|t| t.parse().unwrap()).collect();
        // g2o order is (x y z rx ry rz): the first diagonal entry is internal index 3.
        assert_eq!(vals[0], 4.0);
        assert_eq!(vals[3], 0.5);
        assert_eq!(read_g2o(&text).unwrap(), g);
    }

    #[test]
    fn artifacts_priors_and_inactive_edges() {
        let mut g = PoseGraph::new();
        g.add_pose(NodeId::robot(2, 0), Pose3::identity()).unwrap();
        g.add_pose(NodeId::robot(2, 5), Pose3::from_xyz_yaw(3.0, 1.0, 0.0, 0.3)).unwrap();
        g.add_pose_prior(NodeId::robot(2, 0), Pose3::identity(), odometry_information()).unwrap();
        g.add_artifact_observation(NodeId::robot(2, 0), NodeId::artifact(3), Vec3::new(1.0, 2.0, 0.5), isotropic_information3(0.3)).unwrap();
        g.add_fiducial(1, Vec3::new(-1.0, 0.0, 0.0)).unwrap();
        let lc = g.add_loop_closure(NodeId::robot(2, 0), NodeId::robot(2, 5), Pose3::from_xyz_yaw(3.0, 1.0, 0.0, 0.3), odometry_information()).unwrap();
        g.set_active(lc, false).unwrap();
        let back = read_g2o(&write_g2o(&g)).unwrap();
        assert_eq!(back.node_count(), g.node_count());
        assert!(!back.edges()[lc].active);
        assert!(back.approx_eq(&g, 1e-12));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "# c\nVERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 0 0 zero 0 0 0 1\n";
        assert_eq!(read_g2o(text).unwrap_err().line(), 3);
        let text = "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nEDGE_SE3:QUAT 0 7 0 0 0 0 0 0 1 1 0 0 0 0 0 1 0 0 0 0 1 0 0 0 1 0 0 1 0 1\n";
        assert!(matches!(read_g2o(text), Err(G2oError::Graph { line: 2, source: GraphError::UnknownNode(_) })));
        assert_eq!(read_g2o("BOGUS 1\n").unwrap_err().line(), 1);
        assert_eq!(read_g2o("VERTEX_TRACKXYZ 1000000000000 1 2\n").unwrap_err().line(), 1);
        assert_eq!(read_g2o("VERTEX_TRACKXYZ 1000000000000 1 2 3 4\n").unwrap_err().line(), 1);
    }

    #[test]
    fn id_encoding() {
        for id in [NodeId::robot(0, 0), NodeId::robot(7, 9_999_999), NodeId::artifact(12), NodeId::fiducial(3)] {
            assert_eq!(decode_id(encode_id(&id)), Some(id));
        }
        assert_eq!(decode_id(26), Some(NodeId::robot(0, 26)));
    }

    fn arb_pose() -> impl Strategy<Value = Pose3> {
        (-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3, -3.1f64..3.1, -1.5f64..1.5, -3.1f64..3.1)
            .prop_map(|(x, y, z, r, p, yaw)| Pose3::new(Rot3::from_rpy(r, p, yaw), Vec3::new(x, y, z)))
    }

    proptest! {
        #[test]
        fn round_trip_translations_exact_rotations_close(poses in prop::collection::vec(arb_pose(), 1..12), w in 0.1f64..1e4) {
            let mut g = PoseGraph::new();
            for (i, p) in poses.iter().enumerate() {
                g.add_pose(NodeId::robot(1, i as u32), *p).unwrap();
            }
            for i in 1..poses.len() {
                let z = poses[i - 1].between(&poses[i]);
                g.add_odometry(NodeId::robot(1, i as u32 - 1), NodeId::robot(1, i as u32), z, odometry_information() * w).unwrap();
            }
            let back = read_g2o(&write_g2o(&g)).unwrap();
            prop_assert_eq!(back.node_count(), g.node_count());
            for ((a, na), (b, nb)) in g.nodes().zip(back.nodes()) {
                prop_assert_eq!(a, b);
                match (na.value, nb.value) {
                    (NodeValue::Pose(x), NodeValue::Pose(y)) => prop_assert!(rotation_close(&x, &y)),
                    _ => prop_assert!(false),
                }
            }
            for (ea, eb) in g.edges().iter().zip(back.edges()) {
                match (&ea.factor, &eb.factor) {
                    (Factor::Between { measurement: ma, information: ia, .. }, Factor::Between { measurement: mb, information: ib, .. }) => {
                        prop_assert!(rotation_close(ma, mb));
                        prop_assert_eq!(ia, ib);
                    }
                    _ => prop_assert!(false),
                }
            }
        }
    }
}
