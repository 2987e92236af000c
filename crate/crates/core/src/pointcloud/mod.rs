//! Point clouds, voxel-grid downsampling, nearest-neighbor search and the
//! registration fitness score.

mod kdtree;
pub mod ply;

pub use kdtree::SpatialIndex;

use crate::geometry::{Mat3, Pose3, Vec3};
use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use std::collections::BTreeMap;
use thiserror::Error;

/// Default voxel leaf for scan downsampling (meters).
pub const DEFAULT_VOXEL_LEAF: f64 = 0.25;
/// Default correspondence distance for [`fitness`] (meters).
pub const DEFAULT_FITNESS_MAX_CORRESPONDENCE: f64 = 2.0;
/// Neighborhood size for GICP surface covariances.
pub const COVARIANCE_NEIGHBORS: usize = 20;
/// Regularized eigenvalue along the surface normal; the in-plane ones are 1.
pub const PLANE_EPSILON: f64 = 1e-3;
/// A neighborhood is a planar patch when its middle eigenvalue is at least
/// `PLANARITY_SPREAD` of the largest (two-dimensional, not a bent scan line)
/// and its smallest is at most `PLANARITY_RATIO` of the middle.
pub const PLANARITY_SPREAD: f64 = 0.5;
pub const PLANARITY_RATIO: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointCloudError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("voxel leaf size must be positive, got {0}")]
    InvalidLeaf(f64),
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
}

/// A set of 3D points with optional per-point normals and surface covariances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    covariances: Option<Vec<Mat3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, normals: None, covariances: None }
    }

    /// Like [`PointCloud::new`] but rejects non-finite coordinates.
    pub fn try_new(points: Vec<Vec3>) -> Result<Self, PointCloudError> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(PointCloudError::NonFinite(i));
        }
        Ok(Self::new(points))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    /// Unit surface normals; zero where the neighborhood is not planar
    /// (e.g. a single scan line).
    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn covariances(&self) -> Option<&[Mat3]> {
        self.covariances.as_deref()
    }

    pub fn has_covariances(&self) -> bool {
        self.covariances.is_some()
    }

    /// Applies `pose` to every point (and rotates normals/covariances).
    pub fn transformed(&self, pose: &Pose3) -> PointCloud {
        let r = *pose.rotation.matrix();
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|n| r * n).collect()),
            covariances: self.covariances.as_ref().map(|cs| cs.iter().map(|c| r * c * r.transpose()).collect()),
        }
    }

    /// Appends the points of `other`; per-point attributes are dropped unless both have them.
    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        match (&mut self.normals, &other.normals) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            _ => self.normals = None,
        }
        match (&mut self.covariances, &other.covariances) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            _ => self.covariances = None,
        }
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        Some(self.points.iter().sum::<Vec3>() / self.points.len() as f64)
    }

    pub fn spatial_index(&self) -> SpatialIndex {
        SpatialIndex::new(&self.points)
    }

    /// Estimates normals and plane-regularized GICP covariances from the
    /// `k` nearest neighbors of each point.
    pub fn with_covariances(mut self, index: &SpatialIndex, k: usize) -> PointCloud {
        let (normals, covs): (Vec<Vec3>, Vec<Mat3>) =
            self.points.par_iter().map(|p| surface_covariance(index, p, k)).unzip();
        self.normals = Some(normals);
        self.covariances = Some(covs);
        self
    }

    /// One point per occupied voxel at the centroid of its members; output
    /// ordered lexicographically by voxel key.
    pub fn voxel_downsample(&self, leaf: f64) -> Result<PointCloud, PointCloudError> {
        voxel_downsample(self, leaf)
    }
}

fn surface_covariance(index: &SpatialIndex, p: &Vec3, k: usize) -> (Vec3, Mat3) {
    let neighbors = index.knn(p, k);
    let pts = index.points();
    let n = neighbors.len().max(1) as f64;
    let mean = neighbors.iter().map(|&(i, _)| pts[i]).sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for &(i, _) in &neighbors {
        let d = pts[i] - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (small, mid, large) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    let planar = mid >= PLANARITY_SPREAD * large && small <= PLANARITY_RATIO * mid;
    let normal = if planar { eig.eigenvectors.column(order[0]).into_owned() } else { Vec3::zeros() };
    let mut c = Mat3::zeros();
    for (rank, &col) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(col).into_owned();
        let lambda = if rank == 0 { PLANE_EPSILON } else { 1.0 };
        c += v * v.transpose() * lambda;
    }
    (normal, c)
}

/// Voxel index of `p` for cubic cells of side `leaf`.
pub fn voxel_key(p: &Vec3, leaf: f64) -> (i64, i64, i64) {
    ((p.x / leaf).floor() as i64, (p.y / leaf).floor() as i64, (p.z / leaf).floor() as i64)
}

pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> Result<PointCloud, PointCloudError> {
    if !(leaf > 0.0) || !leaf.is_finite() {
        return Err(PointCloudError::InvalidLeaf(leaf));
    }
    if cloud.is_empty() {
        return Err(PointCloudError::EmptyCloud);
    }
    let mut cells: BTreeMap<(i64, i64, i64), (Vec3, usize)> = BTreeMap::new();
    for p in cloud.points() {
        let e = cells.entry(voxel_key(p, leaf)).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    let points = cells
        .into_iter()
        .map(|(key, (sum, count))| {
            let mut c = sum / count as f64;
            let k = [key.0, key.1, key.2];
            // Rounding can push a centroid across the cell boundary; nudge it back
            // so the filter is idempotent.
            for axis in 0..3 {
                let mut guard = 0;
                loop {
                    let cell = (c[axis] / leaf).floor() as i64;
                    if cell == k[axis] || guard > 64 {
                        break;
                    }
                    c[axis] = if cell < k[axis] { c[axis].next_up() } else { c[axis].next_down() };
                    guard += 1;
                }
            }
            c
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// Mean squared distance from each transformed source point to its nearest
/// target point, over pairs no farther apart than `max_correspondence`.
/// Returns `f64::INFINITY` when no pair qualifies.
pub fn fitness(source: &PointCloud, target: &SpatialIndex, transform: &Pose3, max_correspondence: f64) -> f64 {
    let (sum, count) = source
        .points()
        .par_iter()
        .filter_map(|p| {
            let q = transform.transform_point(p);
            target.nearest(&q).filter(|&(_, d)| d <= max_correspondence).map(|(_, d)| d * d)
        })
        .collect::<Vec<f64>>()
        .iter()
        .fold((0.0, 0usize), |(s, c), d2| (s + d2, c + 1));
    if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
                .collect(),
        )
    }

    #[test]
    fn cube_corners_collapse_to_centroid() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push(Vec3::new(x, y, z));
                }
            }
        }
        let out = PointCloud::new(pts).voxel_downsample(10.0).unwrap();
        assert_eq!(out.points(), &[Vec3::new(0.5, 0.5, 0.5)]);
    }

    #[test]
    fn distant_points_preserved() {
        let c = PointCloud::new(vec![Vec3::new(0.2, 0.2, 0.2), Vec3::new(5.2, 0.2, 0.2)]);
        let out = c.voxel_downsample(1.0).unwrap();
        assert_eq!(out.points(), c.points());
    }

    #[test]
    fn empty_and_bad_leaf() {
        assert_eq!(PointCloud::default().voxel_downsample(1.0), Err(PointCloudError::EmptyCloud));
        let c = PointCloud::new(vec![Vec3::zeros()]);
        assert!(matches!(c.voxel_downsample(0.0), Err(PointCloudError::InvalidLeaf(_))));
    }

    #[test]
    fn output_size_equals_distinct_voxels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = random_cloud(&mut rng, 10_000, 10.0);
        let keys: HashSet<_> = c.points().iter().map(|p| voxel_key(p, 0.5)).collect();
        let out = c.voxel_downsample(0.5).unwrap();
        assert!(out.len() <= 8000);
        assert_eq!(out.len(), keys.len());
    }

    #[test]
    fn downsample_idempotent_and_centroids_inside_voxels() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for leaf in [0.1, 0.25, 0.3, 1.0 / 3.0] {
            let c = random_cloud(&mut rng, 5000, 7.0);
            let once = c.voxel_downsample(leaf).unwrap();
            let twice = once.voxel_downsample(leaf).unwrap();
            assert_eq!(once, twice);
            let source_keys: HashSet<_> = c.points().iter().map(|p| voxel_key(p, leaf)).collect();
            for p in once.points() {
                assert!(source_keys.contains(&voxel_key(p, leaf)));
            }
        }
    }

    #[test]
    fn fitness_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = random_cloud(&mut rng, 300, 5.0);
        let idx = c.spatial_index();
        assert_eq!(fitness(&c, &idx, &Pose3::identity(), 2.0), 0.0);

        // Grid with 1 m spacing shifted by 0.1 m: every nearest neighbor is at 0.1.
        let mut grid = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                grid.push(Vec3::new(x as f64, y as f64, 0.0));
            }
        }
        let src = PointCloud::new(grid.clone());
        let tgt = PointCloud::new(grid.iter().map(|p| p + Vec3::new(0.1, 0.0, 0.0)).collect());
        let f = fitness(&src, &tgt.spatial_index(), &Pose3::identity(), 0.5);
        assert!((f - 0.01).abs() < 1e-12);
        assert_eq!(fitness(&src, &tgt.spatial_index(), &Pose3::from_translation(Vec3::new(50.0, 0.0, 0.0)), 0.5), f64::INFINITY);
    }

    #[test]
    fn fitness_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_cloud(&mut rng, 400, 4.0);
        let b = random_cloud(&mut rng, 500, 4.0);
        let t = Pose3::from_xyz_yaw(0.3, -0.2, 0.1, 0.2);
        let mut sum = 0.0;
        let mut n = 0;
        for p in a.points() {
            let q = t.transform_point(p);
            let d = b.points().iter().map(|r| (r - q).norm()).fold(f64::INFINITY, f64::min);
            if d <= 0.3 {
                sum += d * d;
                n += 1;
            }
        }
        let f = fitness(&a, &b.spatial_index(), &t, 0.3);
        assert!((f - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn scan_line_has_no_normal() {
        let pts: Vec<Vec3> = (0..40).map(|i| Vec3::new(i as f64 * 0.1, 0.01 * (i % 2) as f64, 0.0)).collect();
        let c = PointCloud::new(pts);
        let idx = c.spatial_index();
        let c = c.with_covariances(&idx, COVARIANCE_NEIGHBORS);
        assert!(c.normals().unwrap().iter().all(|n| n.norm() == 0.0));
    }

    #[test]
    fn plane_covariances_are_flat_along_normal() {
        let mut pts = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                pts.push(Vec3::new(x as f64 * 0.1, y as f64 * 0.1, 2.0));
            }
        }
        let c = PointCloud::new(pts);
        let idx = c.spatial_index();
        let c = c.with_covariances(&idx, COVARIANCE_NEIGHBORS);
        let normals = c.normals().unwrap();
        assert!(normals.iter().filter(|n| n.norm() > 0.0).count() >= 50);
        for (n, cov) in normals.iter().zip(c.covariances().unwrap()) {
            assert!(n.norm() == 0.0 || n.z.abs() > 0.999);
            assert!((cov - cov.transpose()).abs().max() < 1e-12);
            assert!((cov[(2, 2)] - PLANE_EPSILON).abs() < 1e-9);
        }
    }
}
