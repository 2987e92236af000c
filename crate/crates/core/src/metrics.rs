//! Trajectory and map error measures against ground truth.

use crate::geometry::{Mat3, Pose3, Rot3, Vec3};
use crate::pointcloud::{PointCloud, SpatialIndex};
use serde::{Deserialize, Serialize};

/// Relative pose error over fixed travelled distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpeStats {
    pub delta: f64,
    pub pairs: usize,
    /// Mean translational error of the relative poses (m).
    pub mean_translation: f64,
    pub rmse_translation: f64,
    pub mean_rotation: f64,
    /// Mean translational error divided by the distance of each pair, in percent.
    pub drift_percent: f64,
}

/// Cumulative path length of a trajectory.
pub fn path_lengths(poses: &[Pose3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += (p.translation - poses[i - 1].translation).norm();
        }
        out.push(acc);
    }
    out
}

/// RPE between pose pairs separated by at least `delta` meters of
/// ground-truth travel. Every start index contributes one pair.
pub fn rpe(ground_truth: &[Pose3], estimate: &[Pose3], delta: f64) -> Option<RpeStats> {
    assert_eq!(ground_truth.len(), estimate.len(), "trajectories must be associated");
    let arc = path_lengths(ground_truth);
    let mut j = 0;
    let (mut n, mut sum_t, mut sum_t2, mut sum_r, mut sum_pct) = (0usize, 0.0, 0.0, 0.0, 0.0);
    for i in 0..ground_truth.len() {
        j = j.max(i);
        while j < arc.len() && arc[j] - arc[i] < delta {
            j += 1;
        }
        if j == arc.len() {
            break;
        }
        let gt = ground_truth[i].between(&ground_truth[j]);
        let est = estimate[i].between(&estimate[j]);
        let err = gt.between(&est);
        let et = err.translation.norm();
        n += 1;
        sum_t += et;
        sum_t2 += et * et;
        sum_r += err.rotation.angle();
        sum_pct += et / (arc[j] - arc[i]);
    }
    (n > 0).then(|| RpeStats {
        delta,
        pairs: n,
        mean_translation: sum_t / n as f64,
        rmse_translation: (sum_t2 / n as f64).sqrt(),
        mean_rotation: sum_r / n as f64,
        drift_percent: 100.0 * sum_pct / n as f64,
    })
}

/// Position error of the final pose relative to the first one.
pub fn end_to_end_error(ground_truth: &[Pose3], estimate: &[Pose3]) -> Option<f64> {
    let (g0, g1) = (ground_truth.first()?, ground_truth.last()?);
    let (e0, e1) = (estimate.first()?, estimate.last()?);
    Some((e0.between(e1).translation - g0.between(g1).translation).norm())
}

/// Rigid transform `T` minimizing Σ‖T·src − dst‖² (Umeyama without scale).
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> Option<Pose3> {
    if src.len() != dst.len() || src.is_empty() {
        return None;
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut sign = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * vt;
    Some(Pose3::new(Rot3::from_matrix(r), mu_d - r * mu_s))
}

/// RMS position error, optionally after rigid alignment of the estimate.
pub fn ate(ground_truth: &[Vec3], estimate: &[Vec3], align: bool) -> Option<f64> {
    if ground_truth.len() != estimate.len() || ground_truth.is_empty() {
        return None;
    }
    let t = if align { umeyama(estimate, ground_truth)? } else { Pose3::identity() };
    let sum: f64 = estimate.iter().zip(ground_truth).map(|(e, g)| (t.transform_point(e) - g).norm_squared()).sum();
    Some((sum / ground_truth.len() as f64).sqrt())
}

/// RMS distance from every map point to the nearest reference surface sample.
pub fn map_rms(map: &PointCloud, reference: &SpatialIndex) -> Option<f64> {
    if map.is_empty() || reference.is_empty() {
        return None;
    }
    let sum: f64 = map.points().iter().map(|p| reference.nearest(p).map(|(_, d)| d * d).unwrap_or(0.0)).sum();
    Some((sum / map.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, step: f64) -> Vec<Pose3> {
        (0..n).map(|i| Pose3::from_xyz_yaw(i as f64 * step, 0.0, 0.0, 0.0)).collect()
    }

    #[test]
    fn rpe_of_exact_estimate_is_zero() {
        let gt = line(50, 0.2);
        let s = rpe(&gt, &gt, 1.0).unwrap();
        assert_eq!(s.mean_translation, 0.0);
        assert_eq!(s.pairs, 45);
    }

    #[test]
    fn constant_scale_drift() {
        let gt = line(101, 0.2);
        let est: Vec<Pose3> = gt.iter().map(|p| Pose3::from_translation(p.translation * 1.02)).collect();
        let s = rpe(&gt, &est, 1.0).unwrap();
        assert!((s.drift_percent - 2.0).abs() < 1e-9, "{}", s.drift_percent);
        assert!((end_to_end_error(&gt, &est).unwrap() - 0.4).abs() < 1e-9);
    }

    #[test]
    fn umeyama_recovers_rigid_transform() {
        let pts: Vec<Vec3> = (0..30).map(|i| Vec3::new((i as f64).sin() * 5.0, (i as f64 * 0.7).cos() * 3.0, i as f64 * 0.1)).collect();
        let t = Pose3::new(Rot3::from_rpy(0.1, -0.2, 1.0), Vec3::new(1.0, 2.0, 3.0));
        let moved: Vec<Vec3> = pts.iter().map(|p| t.transform_point(p)).collect();
        let est = umeyama(&pts, &moved).unwrap();
        assert!(t.between(&est).log_unchecked().to_vector().norm() < 1e-10);
        assert!(ate(&moved, &pts, true).unwrap() < 1e-10);
        assert!(ate(&moved, &pts, false).unwrap() > 1.0);
    }
}
