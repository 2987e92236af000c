use super::*;
use crate::posegraph::diagonal_information;

fn room() -> PointCloud {
    // Three walls of a box room, 0.25 m grid.
    let mut pts = Vec::new();
    for i in 0..40 {
        for j in 0..16 {
            let (u, v) = (i as f64 * 0.25 - 5.0, j as f64 * 0.25 - 1.0);
            pts.push(Vec3::new(u, 3.0 + 0.2 * (u * 1.3).sin(), v));
            pts.push(Vec3::new(u, -3.0, v + 0.1 * (u * 0.7).cos()));
            pts.push(Vec3::new(6.0 + 0.1 * (v * 2.0).sin(), u * 0.6, v));
        }
    }
    PointCloud::new(pts)
}

struct Robot {
    id: u16,
    graph: PoseGraph,
    clouds: BTreeMap<NodeId, PointCloud>,
}

impl Robot {
    fn new(id: u16, start: Pose3) -> Self {
        let mut graph = PoseGraph::new();
        let first = NodeId::robot(id, 0);
        graph.add_pose(first, start).unwrap();
        graph.add_pose_prior(first, start, diagonal_information(0.01, 0.05)).unwrap();
        let mut clouds = BTreeMap::new();
        clouds.insert(first, room());
        Self { id, graph, clouds }
    }

    fn step(&mut self, n: usize) {
        for _ in 0..n {
            let k = self.graph.robot_poses(self.id).len() as u32;
            let (prev, next) = (NodeId::robot(self.id, k - 1), NodeId::robot(self.id, k));
            let delta = Pose3::from_xyz_yaw(1.0, 0.0, 0.0, 0.01);
            let pose = self.graph.pose(&prev).unwrap().compose(&delta);
            self.graph.add_pose(next, pose).unwrap();
            self.graph.add_odometry(prev, next, delta, odometry_information()).unwrap();
            self.clouds.insert(next, room());
        }
    }

    fn payload(&self, since: u64) -> Payload {
        Payload::from_graph(self.id, &self.graph, &self.clouds, since)
    }
}

fn quiet() -> BasestationConfig {
    BasestationConfig { inter_robot_closures: false, ..Default::default() }
}

#[test]
fn second_ingest_of_a_payload_is_a_no_op() {
    let mut r = Robot::new(1, Pose3::identity());
    r.step(4);
    let bytes = r.payload(0).marshal();
    let mut base = Basestation::new(quiet());
    let first = base.ingest(&bytes).unwrap();
    assert_eq!(first.merges[0].status, IngestStatus::Applied);
    assert_eq!(first.merges[0].new_nodes, 5);
    let graph = base.graph().clone();
    let second = base.merge(Payload::unmarshal(&bytes).unwrap()).unwrap();
    assert_eq!(second[0].status, IngestStatus::Duplicate);
    assert_eq!(base.graph(), &graph);
}

#[test]
fn merged_node_count_is_the_sum_over_robots() {
    let mut a = Robot::new(1, Pose3::identity());
    let mut b = Robot::new(2, Pose3::from_xyz_yaw(0.0, 50.0, 0.0, 0.0));
    a.step(6);
    b.step(3);
    let mut base = Basestation::new(quiet());
    let payloads = [a.payload(0).marshal(), b.payload(0).marshal()];
    let report = base.ingest_batch(payloads.iter().map(|p| p.as_slice())).unwrap();
    assert!(report.optimization.is_some());
    assert_eq!(base.graph().node_count(), a.graph.node_count() + b.graph.node_count());
    assert_eq!(base.graph().edge_count(), a.graph.edge_count() + b.graph.edge_count());
    assert_eq!(base.clouds().count(), 11);
}

#[test]
fn incremental_payloads_form_a_union() {
    let mut r = Robot::new(1, Pose3::identity());
    r.step(3);
    let mut base = Basestation::new(quiet());
    base.ingest(&r.payload(0).marshal()).unwrap();
    let acked = r.graph.revision();
    r.step(4);
    let report = base.ingest(&r.payload(acked).marshal()).unwrap();
    assert_eq!(report.merges[0].new_nodes, 4);
    assert_eq!(report.merges[0].new_edges, 4);
    // A later full payload overlaps everything already merged.
    r.step(1);
    base.ingest(&r.payload(0).marshal()).unwrap();
    assert_eq!(base.graph().node_count(), r.graph.node_count());
    assert_eq!(base.graph().edge_count(), r.graph.edge_count());
    assert_eq!(base.robot_revision(1), r.graph.revision());
}

#[test]
fn payload_arriving_early_waits_for_the_gap() {
    let mut r = Robot::new(1, Pose3::identity());
    r.step(2);
    let full = r.payload(0);
    let acked = r.graph.revision();
    r.step(2);
    let later = r.payload(acked);
    let mut base = Basestation::new(quiet());
    assert_eq!(base.merge(later).unwrap()[0].status, IngestStatus::Buffered);
    assert!(base.graph().is_empty());
    let reports = base.merge(full).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|m| m.status == IngestStatus::Applied));
    assert_eq!(base.graph().node_count(), 5);
}

#[test]
fn changed_history_is_a_conflict_and_changes_nothing() {
    let mut r = Robot::new(1, Pose3::identity());
    r.step(3);
    let mut base = Basestation::new(quiet());
    base.ingest(&r.payload(0).marshal()).unwrap();
    let before = base.graph().clone();
    r.step(1);
    let mut p = r.payload(0);
    for rec in &mut p.records {
        if let Record::Edge(EdgeKind::Odometry, Factor::Between { measurement, .. }) = rec {
            measurement.translation.x += 0.5;
            break;
        }
    }
    match base.merge(p) {
        Err(BasestationError::ConflictingRevision { robot: 1, .. }) => {}
        other => panic!("expected a conflict, got {other:?}"),
    }
    assert_eq!(base.graph(), &before);
}

#[test]
fn corrupt_and_foreign_payloads_are_rejected() {
    let mut r = Robot::new(1, Pose3::identity());
    r.step(2);
    let mut bytes = r.payload(0).marshal();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x20;
    let mut base = Basestation::new(quiet());
    assert!(matches!(base.ingest(&bytes), Err(BasestationError::CorruptPayload(_))));
    // Robot 2 claiming robot 1's nodes.
    let mut p = r.payload(0);
    p.robot = 2;
    assert!(matches!(base.merge(p), Err(BasestationError::CorruptPayload(_))));
    assert!(base.graph().is_empty());
}

#[test]
fn new_keys_follow_the_merged_anchor() {
    let mut r = Robot::new(1, Pose3::identity());
    r.step(3);
    let mut base = Basestation::new(quiet());
    base.ingest(&r.payload(0).marshal()).unwrap();
    // The base station moves robot 1's last key; the robot does not know.
    let last = NodeId::robot(1, 3);
    let shifted = base.graph().pose(&last).unwrap().compose(&Pose3::from_xyz_yaw(0.0, 2.0, 0.0, 0.3));
    base.graph.set_pose(last, shifted).unwrap();
    let acked = r.graph.revision();
    r.step(1);
    base.merge(r.payload(acked)).unwrap();
    let expected = shifted.compose(&r.graph.pose(&last).unwrap().between(&r.graph.pose(&NodeId::robot(1, 4)).unwrap()));
    let got = base.graph().pose(&NodeId::robot(1, 4)).unwrap();
    assert!(got.between(&expected).log_unchecked().to_vector().norm() < 1e-12);
}

#[test]
fn manual_closure_checks_its_nodes() {
    let mut r = Robot::new(1, Pose3::identity());
    r.step(3);
    let mut base = Basestation::new(quiet());
    base.ingest(&r.payload(0).marshal()).unwrap();
    let missing = NodeId::robot(1, 99);
    assert!(matches!(base.manual_loop_closure(NodeId::robot(1, 0), missing), Err(BasestationError::UnknownNode(id)) if id == missing));
    assert!(matches!(base.manual_loop_closure(NodeId::robot(1, 1), NodeId::robot(1, 2)), Err(BasestationError::RegistrationFailed(_))));
}

#[test]
fn state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = Robot::new(1, Pose3::identity());
    let mut b = Robot::new(2, Pose3::from_xyz_yaw(0.0, 50.0, 0.0, 0.0));
    a.step(3);
    b.step(2);
    let cfg = BasestationConfig { persist_dir: Some(dir.path().to_path_buf()), persist_every: 1, ..quiet() };
    let mut base = Basestation::new(cfg.clone());
    base.ingest(&a.payload(0).marshal()).unwrap();
    base.ingest(&b.payload(0).marshal()).unwrap();
    let restored = Basestation::restore(dir.path(), cfg).unwrap();
    assert_eq!(restored.graph(), base.graph());
    assert_eq!(restored.robot_revision(1), a.graph.revision());
    assert_eq!(restored.clouds().count(), base.clouds().count());
    for ((ia, ca), (ib, cb)) in restored.clouds().zip(base.clouds()) {
        assert_eq!(ia, ib);
        assert_eq!(ca, cb);
    }
    // Replaying an old payload after the restart is still a duplicate.
    let mut restored = restored;
    assert_eq!(restored.merge(a.payload(0)).unwrap()[0].status, IngestStatus::Duplicate);
}

#[test]
fn graph_view_lists_only_changes() {
    let mut r = Robot::new(1, Pose3::identity());
    r.step(2);
    let mut base = Basestation::new(quiet());
    base.ingest(&r.payload(0).marshal()).unwrap();
    let all = base.graph_view(0);
    assert_eq!(all.nodes.len(), 3);
    assert_eq!(all.edges.len(), 3);
    assert!(base.graph_view(base.revision()).nodes.is_empty());
}

#[test]
fn single_key_at_identity_exports_its_cloud() {
    let r = Robot::new(1, Pose3::identity());
    let mut base = Basestation::new(quiet());
    base.ingest(&r.payload(0).marshal()).unwrap();
    let map = base.export_map(Some(0.1));
    let expected = room().voxel_downsample(0.1).unwrap();
    assert_eq!(map.len(), expected.len());
    for (a, b) in map.points().iter().zip(expected.points()) {
        assert!((a - b).norm() < 1e-9);
    }
}
