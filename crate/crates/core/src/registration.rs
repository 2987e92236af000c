//! Generalized ICP (plane-to-plane) rigid registration.
//!
//! Each correspondence `(s, q)` contributes `dᵀ (C_q + R·C_s·Rᵀ)⁻¹ d` with
//! `d = q − T·s`. The transform is updated by left-multiplied twists,
//! `T ← exp(δ)·T`, so the residual Jacobian is `[ (T·s)^ | −I ]`.

use crate::geometry::{hat, Mat3, Mat6, Pose3, Vec3, Vec6};
use crate::pointcloud::{fitness, PointCloud, SpatialIndex, COVARIANCE_NEIGHBORS};
use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum cloud size; covariance estimation needs full neighborhoods.
pub const MIN_POINTS: usize = 20;

/// Correspondence gate for consecutive-scan and scan-to-submap matching.
pub const SCAN_MATCH_MAX_CORRESPONDENCE: f64 = 1.0;
/// Correspondence gate for loop closures, whose initial guesses are cruder.
pub const LOOP_CLOSURE_MAX_CORRESPONDENCE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GicpParams {
    pub max_correspondence: f64,
    pub max_iterations: usize,
    pub translation_tolerance: f64,
    pub rotation_tolerance: f64,
    pub max_step_halvings: usize,
    /// Degeneracy is reported when the condition number of the translational
    /// point-to-plane information exceeds this.
    pub degeneracy_condition: f64,
}

impl Default for GicpParams {
    fn default() -> Self {
        Self {
            max_correspondence: SCAN_MATCH_MAX_CORRESPONDENCE,
            max_iterations: 64,
            translation_tolerance: 1e-4,
            rotation_tolerance: 1e-4,
            max_step_halvings: 8,
            degeneracy_condition: DEFAULT_DEGENERACY_CONDITION,
        }
    }
}

impl GicpParams {
    pub fn loop_closure() -> Self {
        Self { max_correspondence: LOOP_CLOSURE_MAX_CORRESPONDENCE, ..Self::default() }
    }
}

/// Threshold on the condition number of the translational point-to-plane information.
pub const DEFAULT_DEGENERACY_CONDITION: f64 = 1e3;

/// Objective before and after one accepted Gauss-Newton step (fixed correspondences).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStat {
    pub before: f64,
    pub after: f64,
    pub correspondences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps source coordinates into the target frame.
    pub transform: Pose3,
    pub fitness: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Condition number of the translational point-to-plane information at the solution.
    pub condition: f64,
    pub trace: Vec<IterationStat>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("registration needs at least {MIN_POINTS} points (source {source_len}, target {target_len})")]
    InsufficientPoints { source_len: usize, target_len: usize },
    /// The geometry leaves some direction unconstrained (e.g. a featureless
    /// corridor). The best estimate found is attached.
    #[error("degenerate registration problem (condition number {condition:.3e})")]
    DegenerateProblem { condition: f64, result: Box<RegistrationResult> },
}

/// A cloud with surface covariances and a spatial index, ready to be used on
/// either side of a registration.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    cloud: PointCloud,
    index: SpatialIndex,
}

impl PreparedCloud {
    pub fn new(cloud: PointCloud) -> Self {
        let index = cloud.spatial_index();
        let cloud = if cloud.has_covariances() { cloud } else { cloud.with_covariances(&index, COVARIANCE_NEIGHBORS) };
        Self { cloud, index }
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

struct Correspondence {
    source: Vec3,
    target: Vec3,
    source_cov: Mat3,
    target_cov: Mat3,
    target_normal: Vec3,
}

fn correspond(source: &PreparedCloud, target: &PreparedCloud, t: &Pose3, max_corr: f64) -> Vec<Correspondence> {
    let s_cov = source.cloud.covariances().expect("prepared");
    let t_cov = target.cloud.covariances().expect("prepared");
    let t_nrm = target.cloud.normals().expect("prepared");
    let t_pts = target.cloud.points();
    source
        .cloud
        .points()
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let p = t.transform_point(s);
            let (j, d) = target.index.nearest(&p)?;
            (d <= max_corr).then(|| Correspondence {
                source: *s,
                target: t_pts[j],
                source_cov: s_cov[i],
                target_cov: t_cov[j],
                target_normal: t_nrm[j],
            })
        })
        .collect()
}

fn mahalanobis_weights(corr: &[Correspondence], r: &Mat3) -> Vec<Mat3> {
    corr.par_iter()
        .map(|c| {
            let m = c.target_cov + r * c.source_cov * r.transpose();
            m.try_inverse().unwrap_or_else(Mat3::zeros)
        })
        .collect()
}

fn objective(corr: &[Correspondence], weights: &[Mat3], t: &Pose3) -> f64 {
    corr.par_iter()
        .zip(weights.par_iter())
        .map(|(c, w)| {
            let d = c.target - t.transform_point(&c.source);
            d.dot(&(w * d))
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

fn normal_equations(corr: &[Correspondence], weights: &[Mat3], t: &Pose3) -> (Mat6, Vec6) {
    corr.par_iter()
        .zip(weights.par_iter())
        .map(|(c, w)| {
            let p = t.transform_point(&c.source);
            let e = c.target - p;
            let mut j = nalgebra::Matrix3x6::<f64>::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&p));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Mat3::identity()));
            let jt_w = j.transpose() * w;
            (jt_w * j, jt_w * e)
        })
        .collect::<Vec<_>>()
        .iter()
        .fold((Mat6::zeros(), Vec6::zeros()), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Condition number of the translational point-to-plane information once
/// rotation is marginalized out (Schur complement). Only planar patches carry
/// a normal, so isolated scan lines do not count as constraints.
fn geometric_condition(corr: &[Correspondence], t: &Pose3) -> f64 {
    if corr.is_empty() {
        return f64::INFINITY;
    }
    let pts: Vec<Vec3> = corr.iter().map(|c| t.transform_point(&c.source)).collect();
    let centroid = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let mut h = Mat6::zeros();
    for (c, p) in corr.iter().zip(&pts) {
        let n = c.target_normal;
        let mut row = Vec6::zeros();
        row.fixed_rows_mut::<3>(0).copy_from(&(p - centroid).cross(&n));
        row.fixed_rows_mut::<3>(3).copy_from(&n);
        h += row * row.transpose();
    }
    h /= corr.len() as f64;
    let h_rr: Mat3 = h.fixed_view::<3, 3>(0, 0).into();
    let h_rt: Mat3 = h.fixed_view::<3, 3>(0, 3).into();
    let h_tt: Mat3 = h.fixed_view::<3, 3>(3, 3).into();
    let Some(h_rr_inv) = h_rr.try_inverse() else {
        return f64::INFINITY;
    };
    let schur = h_tt - h_rt.transpose() * h_rr_inv * h_rt;
    let eig = SymmetricEigen::new(schur).eigenvalues;
    let (min, max) = (eig.min(), eig.max());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Registers `source` onto `target` starting from `init`.
pub fn gicp(source: &PointCloud, target: &PointCloud, init: &Pose3, params: &GicpParams) -> Result<RegistrationResult, RegistrationError> {
    if source.len() < MIN_POINTS || target.len() < MIN_POINTS {
        return Err(RegistrationError::InsufficientPoints { source_len: source.len(), target_len: target.len() });
    }
    align(&PreparedCloud::new(source.clone()), &PreparedCloud::new(target.clone()), init, params)
}

/// [`gicp`] on clouds whose covariances and index are already built.
pub fn align(source: &PreparedCloud, target: &PreparedCloud, init: &Pose3, params: &GicpParams) -> Result<RegistrationResult, RegistrationError> {
    if source.len() < MIN_POINTS || target.len() < MIN_POINTS {
        return Err(RegistrationError::InsufficientPoints { source_len: source.len(), target_len: target.len() });
    }
    let mut t = *init;
    let mut converged = false;
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut singular = false;

    while iterations < params.max_iterations {
        iterations += 1;
        let corr = correspond(source, target, &t, params.max_correspondence);
        if corr.len() < 6 {
            break;
        }
        let weights = mahalanobis_weights(&corr, t.rotation.matrix());
        let before = objective(&corr, &weights, &t);
        let (h, g) = normal_equations(&corr, &weights, &t);
        let Some(chol) = h.cholesky() else {
            singular = true;
            break;
        };
        let delta = -chol.solve(&g);
        let small = |d: &Vec6| {
            d.fixed_rows::<3>(0).norm() < params.rotation_tolerance && d.fixed_rows::<3>(3).norm() < params.translation_tolerance
        };

        let mut step = delta;
        let mut accepted = None;
        for _ in 0..=params.max_step_halvings {
            let candidate = Pose3::exp_vector(&step).compose(&t);
            let after = objective(&corr, &weights, &candidate);
            if after <= before {
                accepted = Some((candidate, after));
                break;
            }
            if small(&step) {
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((candidate, after)) => {
                trace.push(IterationStat { before, after, correspondences: corr.len() });
                t = candidate;
                if small(&step) {
                    converged = true;
                    break;
                }
            }
            None => {
                // No descent along the Gauss-Newton direction: a numerical minimum
                // if the step is already below tolerance.
                converged = small(&step);
                break;
            }
        }
    }

    let final_corr = correspond(source, target, &t, params.max_correspondence);
    let condition = geometric_condition(&final_corr, &t);
    let result = RegistrationResult {
        transform: t,
        fitness: fitness(source.cloud(), target.index(), &t, params.max_correspondence),
        iterations,
        converged: converged && !singular,
        condition,
        trace,
    };
    if singular || condition > params.degeneracy_condition {
        let condition = if singular { f64::INFINITY } else { condition };
        return Err(RegistrationError::DegenerateProblem { condition, result: Box::new(result) });
    }
    Ok(result)
}
