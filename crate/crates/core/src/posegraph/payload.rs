//! Binary robot-to-base-station payload.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        8 bytes  "LAMPPKT1"
//! robot        u16
//! since        u64      revision the receiver already has (0 = full)
//! revision     u64      sender graph revision at marshal time
//! edge_offset  u64      ordinal of the first edge record in the block
//! g2o_len      u32, then g2o text (UTF-8)
//! cloud_count  u32, then per cloud: node id u64 (g2o encoding), ply_len u32, ASCII PLY
//! crc32        u32      over every preceding byte
//! ```
//!
//! An incremental payload carries the vertices and edges created after
//! `since`, plus `EDGE_ACTIVE` records for older edges whose flag changed.
//! Because edges are append-only, the new edges are a suffix of the sender's
//! edge list starting at `edge_offset`.

use super::g2o::{self, Record};
use super::{NodeId, PoseGraph};
use crate::pointcloud::{ply, PointCloud};
use std::collections::BTreeMap;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"LAMPPKT1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PayloadError {
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
}

fn corrupt(msg: impl Into<String>) -> PayloadError {
    PayloadError::CorruptPayload(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Payload {
    pub robot: u16,
    pub since: u64,
    pub revision: u64,
    pub edge_offset: usize,
    pub records: Vec<Record>,
    pub clouds: Vec<(NodeId, PointCloud)>,
}

impl Payload {
    /// Builds the records of `graph` newer than `since`, with the clouds of
    /// the new nodes.
    pub fn from_graph(robot: u16, graph: &PoseGraph, clouds: &BTreeMap<NodeId, PointCloud>, since: u64) -> Self {
        let mut records: Vec<Record> = graph
            .nodes()
            .filter(|(_, n)| n.created > since)
            .map(|(id, n)| Record::Vertex(*id, n.value))
            .collect();
        let edges = graph.edges();
        let edge_offset = edges.iter().position(|e| e.created > since).unwrap_or(edges.len());
        records.extend(edges[edge_offset..].iter().map(|e| Record::Edge(e.kind, e.factor.clone())));
        for (ordinal, e) in edges.iter().enumerate() {
            let changed_old = ordinal < edge_offset && e.modified > since;
            let inactive_new = ordinal >= edge_offset && !e.active;
            if changed_old || inactive_new {
                records.push(Record::Active { ordinal, active: e.active });
            }
        }
        let clouds = clouds
            .iter()
            .filter(|(id, _)| graph.node(id).is_some_and(|n| n.created > since))
            .map(|(id, c)| (*id, c.clone()))
            .collect();
        Payload { robot, since, revision: graph.revision(), edge_offset, records, clouds }
    }

    /// Rebuilds a standalone graph from a full payload.
    pub fn to_graph(&self) -> Result<PoseGraph, super::GraphError> {
        let mut graph = PoseGraph::new();
        for r in &self.records {
            let edges = graph.edge_count();
            g2o::apply_record(&mut graph, r, |o| o.checked_sub(self.edge_offset).filter(|&o| o < edges))?;
        }
        Ok(graph)
    }

    pub fn marshal(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.robot.to_le_bytes());
        out.extend_from_slice(&self.since.to_le_bytes());
        out.extend_from_slice(&self.revision.to_le_bytes());
        out.extend_from_slice(&(self.edge_offset as u64).to_le_bytes());
        let text = g2o::write_records(&self.records);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.clouds.len() as u32).to_le_bytes());
        for (id, cloud) in &self.clouds {
            out.extend_from_slice(&g2o::encode_id(id).to_le_bytes());
            let ply = ply::to_ply_string(cloud);
            out.extend_from_slice(&(ply.len() as u32).to_le_bytes());
            out.extend_from_slice(ply.as_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn unmarshal(bytes: &[u8]) -> Result<Payload, PayloadError> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(corrupt("payload too short"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let robot = r.u16()?;
        let since = r.u64()?;
        let revision = r.u64()?;
        let edge_offset = usize::try_from(r.u64()?).map_err(|_| corrupt("edge offset overflow"))?;
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("g2o block is not UTF-8"))?;
        let records = g2o::parse_records(text)
            .map_err(|e| corrupt(format!("g2o block: {e}")))?
            .into_iter()
            .map(|(_, rec)| rec)
            .collect();
        let count = r.u32()? as usize;
        let mut clouds = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let raw = r.u64()?;
            let id = g2o::decode_id(raw).ok_or_else(|| corrupt(format!("bad node id {raw}")))?;
            let n = r.u32()? as usize;
            let cloud = ply::read_ply(r.take(n)?).map_err(|e| corrupt(format!("cloud for {id}: {e}")))?;
            clouds.push((id, cloud));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Payload { robot, since, revision, edge_offset, records, clouds })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("length exceeds payload"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose3, Vec3};
    use crate::posegraph::{odometry_information, EdgeKind};

    fn robot_graph(n: u32) -> (PoseGraph, BTreeMap<NodeId, PointCloud>) {
        let mut g = PoseGraph::new();
        let mut clouds = BTreeMap::new();
        for i in 0..n {
            let id = NodeId::robot(4, i);
            g.add_pose(id, Pose3::from_xyz_yaw(i as f64, 0.0, 0.0, 0.1 * i as f64)).unwrap();
            clouds.insert(id, PointCloud::new(vec![Vec3::new(i as f64, 1.5, -0.25), Vec3::new(0.1, 0.2, 0.3)]));
            if i > 0 {
                let z = g.pose(&NodeId::robot(4, i - 1)).unwrap().between(&g.pose(&id).unwrap());
                g.add_odometry(NodeId::robot(4, i - 1), id, z, odometry_information()).unwrap();
            }
        }
        g.add_pose_prior(NodeId::robot(4, 0), Pose3::identity(), odometry_information()).unwrap();
        (g, clouds)
    }

    #[test]
    fn full_round_trip() {
        let (g, clouds) = robot_graph(5);
        let p = Payload::from_graph(4, &g, &clouds, 0);
        let back = Payload::unmarshal(&p.marshal()).unwrap();
        assert_eq!(back.robot, 4);
        assert_eq!(back.revision, g.revision());
        assert!(back.to_graph().unwrap().approx_eq(&g, 1e-12));
        let back_clouds: BTreeMap<NodeId, PointCloud> = back.clouds.into_iter().collect();
        assert_eq!(back_clouds, clouds);
    }

    #[test]
    fn incremental_after_one_key() {
        let (mut g, mut clouds) = robot_graph(5);
        let since = g.revision();
        let id = NodeId::robot(4, 5);
        g.add_pose(id, Pose3::from_xyz_yaw(5.0, 0.0, 0.0, 0.0)).unwrap();
        g.add_odometry(NodeId::robot(4, 4), id, Pose3::from_xyz_yaw(1.0, 0.0, 0.0, 0.0), odometry_information()).unwrap();
        clouds.insert(id, PointCloud::new(vec![Vec3::zeros()]));
        let p = Payload::unmarshal(&Payload::from_graph(4, &g, &clouds, since).marshal()).unwrap();
        let vertices = p.records.iter().filter(|r| matches!(r, Record::Vertex(..))).count();
        let edges = p.records.iter().filter(|r| matches!(r, Record::Edge(..))).count();
        assert_eq!((vertices, edges, p.clouds.len()), (1, 1, 1));
        assert_eq!(p.edge_offset, g.edge_count() - 1);
        assert!(matches!(p.records[1], Record::Edge(EdgeKind::Odometry, _)));
    }

    #[test]
    fn status_change_is_sent_incrementally() {
        let (mut g, clouds) = robot_graph(4);
        let since = g.revision();
        g.set_active(1, false).unwrap();
        let p = Payload::from_graph(4, &g, &clouds, since);
        assert_eq!(p.records, vec![Record::Active { ordinal: 1, active: false }]);
    }

    #[test]
    fn truncated_or_flipped_payload_is_corrupt() {
        let (g, clouds) = robot_graph(3);
        let bytes = Payload::from_graph(4, &g, &clouds, 0).marshal();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Payload::unmarshal(&bytes[..cut]), Err(PayloadError::CorruptPayload(_))));
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(Payload::unmarshal(&flipped).is_err());
    }
}
