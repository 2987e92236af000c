//! Pose-graph-only scenarios with labeled loop closures, for scoring
//! outlier rejection without running the lidar pipeline.

use crate::geometry::{Pose3, Rot3, Vec3, Vec6};
use crate::icm::LoopClosure;
use crate::posegraph::{diagonal_information, NodeId, PoseGraph};
use crate::Mat6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct GraphScenarioConfig {
    pub laps: usize,
    /// Rectangle sides (m); poses are spaced 1 m apart.
    pub size: (f64, f64),
    pub odometry_sigma: (f64, f64),
    pub closure_sigma: (f64, f64),
    pub inliers: usize,
    /// Upper bound on outliers / (inliers + outliers).
    pub max_outlier_ratio: f64,
    pub outlier_translation: (f64, f64),
    pub outlier_yaw_deg: f64,
    /// All outliers share one world displacement and so agree with each other.
    pub colluding: bool,
    /// Fixed outlier count instead of one drawn from the ratio bound.
    pub outliers: Option<usize>,
}

impl Default for GraphScenarioConfig {
    fn default() -> Self {
        Self {
            laps: 2,
            size: (20.0, 10.0),
            odometry_sigma: (0.002, 0.01),
            closure_sigma: (0.003, 0.03),
            inliers: 15,
            max_outlier_ratio: 0.3,
            outlier_translation: (3.0, 10.0),
            outlier_yaw_deg: 20.0,
            colluding: false,
            outliers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClosure {
    pub closure: LoopClosure,
    pub outlier: bool,
}

#[derive(Clone, Debug)]
pub struct GraphScenario {
    /// Poses initialized from noisy odometry, odometry edges and a start prior.
    pub graph: PoseGraph,
    pub ground_truth: Vec<Pose3>,
    /// Closures in arrival order.
    pub closures: Vec<LabeledClosure>,
    pub closure_information: Mat6,
}

fn noise(rng: &mut ChaCha8Rng, sigma: (f64, f64)) -> Pose3 {
    let (r, t) = (Normal::new(0.0, sigma.0).expect("sigma"), Normal::new(0.0, sigma.1).expect("sigma"));
    let v = Vec6::new(r.sample(rng), r.sample(rng), r.sample(rng), t.sample(rng), t.sample(rng), t.sample(rng));
    Pose3::exp_vector(&v)
}

fn rectangle(laps: usize, size: (f64, f64)) -> Vec<Pose3> {
    let (w, h) = size;
    let perimeter = 2.0 * (w + h);
    let per_lap = perimeter.round() as usize;
    (0..laps * per_lap)
        .map(|i| {
            let lap = i / per_lap;
            let s = (i % per_lap) as f64;
            // Each lap is offset sideways so revisits are near but not identical.
            let inset = 0.3 * lap as f64;
            let (x, y, yaw) = if s < w {
                (s, inset, 0.0)
            } else if s < w + h {
                (w - inset, s - w, std::f64::consts::FRAC_PI_2)
            } else if s < 2.0 * w + h {
                (w - (s - w - h), h - inset, std::f64::consts::PI)
            } else {
                (inset, h - (s - 2.0 * w - h), -std::f64::consts::FRAC_PI_2)
            };
            Pose3::new(Rot3::rz(yaw), Vec3::new(x, y, 0.05 * lap as f64))
        })
        .collect()
}

pub fn graph_scenario(seed: u64, cfg: &GraphScenarioConfig) -> GraphScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = rectangle(cfg.laps.max(2), cfg.size);
    let per_lap = (2.0 * (cfg.size.0 + cfg.size.1)).round() as usize;
    let id = |i: usize| NodeId::robot(1, i as u32);
    let odom_info = diagonal_information(cfg.odometry_sigma.0, cfg.odometry_sigma.1);
    let mut graph = PoseGraph::new();
    let mut estimate = truth[0];
    graph.add_pose(id(0), estimate).expect("fresh graph");
    graph.add_pose_prior(id(0), truth[0], diagonal_information(1e-3, 1e-3)).expect("node exists");
    for i in 1..truth.len() {
        let z = truth[i - 1].between(&truth[i]).compose(&noise(&mut rng, cfg.odometry_sigma));
        estimate = estimate.compose(&z);
        graph.add_pose(id(i), estimate).expect("new node");
        graph.add_odometry(id(i - 1), id(i), z, odom_info).expect("chain edge");
    }
    let mut closures = Vec::new();
    // Inliers: a pose on a later lap revisiting a pose of an earlier lap.
    while closures.len() < cfg.inliers {
        let a = rng.random_range(0..per_lap * (cfg.laps.max(2) - 1));
        let b = (a + per_lap).saturating_add_signed(rng.random_range(-2i64..=2) as isize);
        if b >= truth.len() || b <= a + 10 {
            continue;
        }
        let z = truth[a].between(&truth[b]).compose(&noise(&mut rng, cfg.closure_sigma));
        closures.push(LabeledClosure { closure: LoopClosure::new(id(a), id(b), z), outlier: false });
    }
    let ratio = rng.random_range(cfg.max_outlier_ratio / 3.0..=cfg.max_outlier_ratio);
    let outliers = cfg.outliers.unwrap_or(((cfg.inliers as f64) * ratio / (1.0 - ratio)).floor() as usize);
    let shared_shift = {
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        let mag = rng.random_range(cfg.outlier_translation.0..=cfg.outlier_translation.1);
        Pose3::from_xyz_yaw(mag * dir.cos(), mag * dir.sin(), 0.0, 0.0)
    };
    let mut made = 0;
    while made < outliers {
        let a = rng.random_range(0..truth.len());
        let b = rng.random_range(0..truth.len());
        let (a, b) = (a.min(b), a.max(b));
        if b <= a + 10 {
            continue;
        }
        let z = if cfg.colluding {
            truth[a].inverse().compose(&shared_shift).compose(&truth[b])
        } else {
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let mag = rng.random_range(cfg.outlier_translation.0..=cfg.outlier_translation.1);
            let yaw = rng.random_range(-cfg.outlier_yaw_deg..=cfg.outlier_yaw_deg).to_radians();
            truth[a].between(&truth[b]).compose(&Pose3::from_xyz_yaw(mag * dir.cos(), mag * dir.sin(), 0.0, yaw))
        };
        closures.push(LabeledClosure { closure: LoopClosure::new(id(a), id(b), z), outlier: true });
        made += 1;
    }
    // Arrival order.
    for i in (1..closures.len()).rev() {
        let j = rng.random_range(0..=i);
        closures.swap(i, j);
    }
    GraphScenario { graph, ground_truth: truth, closures, closure_information: diagonal_information(cfg.closure_sigma.0.max(0.01), cfg.closure_sigma.1.max(0.05)) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labeled() {
        let cfg = GraphScenarioConfig::default();
        let a = graph_scenario(3, &cfg);
        let b = graph_scenario(3, &cfg);
        assert_eq!(a.closures, b.closures);
        assert_eq!(a.graph, b.graph);
        let outliers = a.closures.iter().filter(|c| c.outlier).count();
        assert_eq!(a.closures.len() - outliers, cfg.inliers);
        assert!(outliers as f64 / a.closures.len() as f64 <= cfg.max_outlier_ratio + 1e-12);
        for c in &a.closures {
            let (i, j) = (c.closure.from.index as usize, c.closure.to.index as usize);
            let truth = a.ground_truth[i].between(&a.ground_truth[j]);
            let err = truth.between(&c.closure.measurement).translation.norm();
            assert_eq!(err > 1.0, c.outlier, "{err}");
        }
    }

    #[test]
    fn laps_revisit() {
        let t = rectangle(2, (20.0, 10.0));
        assert_eq!(t.len(), 120);
        assert!((t[5].translation - t[65].translation).norm() < 0.5);
    }
}
