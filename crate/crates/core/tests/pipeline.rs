use lamp_core::basestation::key_ground_truth;
use lamp_core::metrics;
use lamp_core::pipeline::{fuse_map, run_dataset, PipelineConfig};
use lamp_core::pointcloud::{PointCloud, SpatialIndex};
use lamp_core::sim::{Dataset, Scenario};
use std::path::Path;

const SHORT: &str = r#"
name: short
seed: 8
world:
  texture: 0.15
  bump_density: 0.6
  rib_spacing: 5.0
  corridors:
    - centerline: [[0, 0], [24, 0], [24, 12]]
robots:
  - id: 1
    waypoints: [[2, 0], [24, 0], [24, 10]]
"#;

fn short(noiseless: bool) -> Dataset {
    let mut s = Scenario::from_yaml(SHORT).unwrap();
    s.noiseless = noiseless;
    Dataset::generate(&s).unwrap()
}

#[test]
fn noiseless_scans_give_exact_odometry() {
    let d = short(true);
    let run = run_dataset(&d, &PipelineConfig::default()).unwrap();
    let m = &run.robots[0];
    let gt = d.robots[0].ground_truth.as_ref().unwrap();
    let keys = m.key_trajectory();
    let est: Vec<_> = keys.iter().map(|k| k.2).collect();
    let truth: Vec<_> = keys.iter().map(|k| gt[k.1]).collect();
    let ate = metrics::ate(&truth.iter().map(|p| p.translation).collect::<Vec<_>>(), &est.iter().map(|p| p.translation).collect::<Vec<_>>(), false).unwrap();
    assert!(ate < 0.05, "ATE {ate:.4} m");
    assert_eq!(m.low_confidence, 0);
}

#[test]
fn runs_are_bit_identical() {
    let d = short(false);
    let a = run_dataset(&d, &PipelineConfig::default()).unwrap();
    let b = run_dataset(&d, &PipelineConfig::default()).unwrap();
    assert_eq!(a.robots[0].graph, b.robots[0].graph);
}

#[test]
fn rejecting_outliers_keeps_the_map_consistent() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/loop.yaml");
    let d = Dataset::generate(&Scenario::load(&path).unwrap()).unwrap();
    let mut rms = Vec::new();
    for icm in [true, false] {
        let run = run_dataset(&d, &PipelineConfig { icm, ..Default::default() }).unwrap();
        let mut surface = PointCloud::default();
        for pose in key_ground_truth(&d, &run.robots).poses.values() {
            surface.extend(&d.noiseless_scan(pose).unwrap().transformed(pose));
        }
        let m = &run.robots[0];
        let clouds = m.key_clouds();
        let map = fuse_map(&m.graph, &clouds, 0.1);
        rms.push(metrics::map_rms(&map, &SpatialIndex::new(surface.points())).unwrap());
    }
    println!("map RMS with ICM {:.3} m, without {:.3} m", rms[0], rms[1]);
    assert!(rms[1] > rms[0]);
}
