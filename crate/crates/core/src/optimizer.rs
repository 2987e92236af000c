//! Gauss-Newton pose-graph optimization over SE(3) poses and 3D points.
//!
//! Poses are perturbed on the right, `T ← T·exp(δ)` with `δ = [φ; ρ]`;
//! points additively. The normal equations are assembled in NodeId order and
//! solved with a sparse Cholesky factorization.

use crate::geometry::{hat, se3_right_jacobian_inverse, Mat3, Pose3, Vec3};
use crate::posegraph::{Factor, NodeId, NodeValue, PoseGraph};
use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerParams {
    pub max_iterations: usize,
    /// Stop when `(e_prev − e) / e_prev` falls below this.
    pub relative_tolerance: f64,
    pub max_step_halvings: usize,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self { max_iterations: 50, relative_tolerance: 1e-6, max_step_halvings: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No step size reduced the error; the best iterate was kept.
    NonDecreasing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub initial_error: f64,
    pub final_error: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Total weighted error after each accepted iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("edge references missing node {0}")]
    MissingNode(NodeId),
}

/// Residual, information and per-variable Jacobians of one factor.
#[derive(Clone, Debug)]
pub struct Linearized {
    pub residual: DVector<f64>,
    pub information: DMatrix<f64>,
    pub jacobians: Vec<(NodeId, DMatrix<f64>)>,
}

fn pose_of(values: &BTreeMap<NodeId, NodeValue>, id: &NodeId) -> Result<Pose3, OptimizerError> {
    match values.get(id) {
        Some(NodeValue::Pose(p)) => Ok(*p),
        _ => Err(OptimizerError::MissingNode(*id)),
    }
}

fn point_of(values: &BTreeMap<NodeId, NodeValue>, id: &NodeId) -> Result<Vec3, OptimizerError> {
    match values.get(id) {
        Some(NodeValue::Point(p)) => Ok(*p),
        _ => Err(OptimizerError::MissingNode(*id)),
    }
}

fn dmat<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn dvec<const R: usize>(v: &nalgebra::SVector<f64, R>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

/// Residual of one factor; `(residual, information)`.
pub fn residual(factor: &Factor, values: &BTreeMap<NodeId, NodeValue>) -> Result<(DVector<f64>, DMatrix<f64>), OptimizerError> {
    Ok(match factor {
        Factor::Between { from, to, measurement, information } => {
            let ti = pose_of(values, from)?;
            let tj = pose_of(values, to)?;
            let e = measurement.inverse().compose(&ti.inverse()).compose(&tj);
            (dvec(&e.log_unchecked().to_vector()), dmat(information))
        }
        Factor::Observation { pose, point, measurement, information } => {
            let t = pose_of(values, pose)?;
            let p = point_of(values, point)?;
            (dvec(&(t.inverse_transform_point(&p) - measurement)), dmat(information))
        }
        Factor::PosePrior { node, measurement, information } => {
            let t = pose_of(values, node)?;
            (dvec(&measurement.inverse().compose(&t).log_unchecked().to_vector()), dmat(information))
        }
        Factor::PointPrior { node, measurement, information } => {
            let p = point_of(values, node)?;
            (dvec(&(p - measurement)), dmat(information))
        }
    })
}

/// Residual and analytic Jacobians with respect to the tangent-space
/// perturbations of each variable.
pub fn linearize(factor: &Factor, values: &BTreeMap<NodeId, NodeValue>) -> Result<Linearized, OptimizerError> {
    let (residual_vec, information) = residual(factor, values)?;
    let jacobians = match factor {
        Factor::Between { from, to, .. } => {
            let ti = pose_of(values, from)?;
            let tj = pose_of(values, to)?;
            let r = nalgebra::Vector6::from_column_slice(residual_vec.as_slice());
            let jr_inv = se3_right_jacobian_inverse(&r);
            let ji = -jr_inv * tj.inverse().compose(&ti).adjoint();
            vec![(*from, dmat(&ji)), (*to, dmat(&jr_inv))]
        }
        Factor::Observation { pose, point, .. } => {
            let t = pose_of(values, pose)?;
            let p = point_of(values, point)?;
            let q = t.inverse_transform_point(&p);
            let mut jp = nalgebra::Matrix3x6::<f64>::zeros();
            jp.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&q));
            jp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Mat3::identity()));
            let jpt: Mat3 = t.rotation.matrix().transpose();
            vec![(*pose, dmat(&jp)), (*point, dmat(&jpt))]
        }
        Factor::PosePrior { node, .. } => {
            let r = nalgebra::Vector6::from_column_slice(residual_vec.as_slice());
            vec![(*node, dmat(&se3_right_jacobian_inverse(&r)))]
        }
        Factor::PointPrior { node, .. } => vec![(*node, DMatrix::identity(3, 3))],
    };
    Ok(Linearized { residual: residual_vec, information, jacobians })
}

/// Applies a tangent-space update to one variable.
pub fn retract(value: &NodeValue, delta: &[f64]) -> NodeValue {
    match value {
        NodeValue::Pose(p) => NodeValue::Pose(p.compose(&Pose3::exp_vector(&nalgebra::Vector6::from_column_slice(delta)))),
        NodeValue::Point(p) => NodeValue::Point(p + Vec3::from_column_slice(delta)),
    }
}

fn dim(value: &NodeValue) -> usize {
    match value {
        NodeValue::Pose(_) => 6,
        NodeValue::Point(_) => 3,
    }
}

fn weighted(r: &DVector<f64>, info: &DMatrix<f64>) -> f64 {
    r.dot(&(info * r))
}

/// Sum of `rᵀ Ω r` over the active edges.
pub fn total_error(graph: &PoseGraph) -> Result<f64, OptimizerError> {
    let values = graph.estimates();
    let factors: Vec<&Factor> = graph.active_edges().map(|(_, e)| &e.factor).collect();
    error_of(&factors, &values)
}

fn error_of(factors: &[&Factor], values: &BTreeMap<NodeId, NodeValue>) -> Result<f64, OptimizerError> {
    factors
        .par_iter()
        .map(|f| residual(f, values).map(|(r, info)| weighted(&r, &info)))
        .collect::<Result<Vec<f64>, _>>()
        .map(|v| v.iter().sum())
}

struct Layout {
    offsets: HashMap<NodeId, usize>,
    order: Vec<NodeId>,
    size: usize,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Variables touched by active edges, in NodeId order; checks that every
/// connected component is anchored by a prior.
fn layout(factors: &[&Factor], values: &BTreeMap<NodeId, NodeValue>) -> Result<Layout, OptimizerError> {
    let mut used: BTreeMap<NodeId, usize> = BTreeMap::new();
    for f in factors {
        let (a, b) = f.nodes();
        for id in std::iter::once(a).chain(b) {
            if !values.contains_key(&id) {
                return Err(OptimizerError::MissingNode(id));
            }
            used.insert(id, 0);
        }
    }
    for (i, v) in used.values_mut().enumerate() {
        *v = i;
    }
    let mut parent: Vec<usize> = (0..used.len()).collect();
    let mut anchored = vec![false; used.len()];
    for f in factors {
        match f.nodes() {
            (a, Some(b)) => {
                let (ra, rb) = (find(&mut parent, used[&a]), find(&mut parent, used[&b]));
                parent[ra] = rb;
            }
            (a, None) => anchored[used[&a]] = true,
        }
    }
    let mut root_anchored = vec![false; used.len()];
    for i in 0..used.len() {
        if anchored[i] {
            let r = find(&mut parent, i);
            root_anchored[r] = true;
        }
    }
    for (id, &i) in &used {
        if !root_anchored[find(&mut parent, i)] {
            return Err(OptimizerError::SingularSystem(format!("node {id} is not connected to any prior")));
        }
    }
    let mut offsets = HashMap::with_capacity(used.len());
    let mut order = Vec::with_capacity(used.len());
    let mut size = 0;
    for id in used.keys() {
        offsets.insert(*id, size);
        order.push(*id);
        size += dim(&values[id]);
    }
    Ok(Layout { offsets, order, size })
}

fn solve(factors: &[&Factor], values: &BTreeMap<NodeId, NodeValue>, layout: &Layout) -> Result<DVector<f64>, OptimizerError> {
    let lin: Vec<Linearized> = factors.par_iter().map(|f| linearize(f, values)).collect::<Result<_, _>>()?;
    let mut coo = CooMatrix::new(layout.size, layout.size);
    let mut g = DVector::zeros(layout.size);
    for l in &lin {
        let weighted_r = &l.information * &l.residual;
        for (a, ja) in &l.jacobians {
            let oa = layout.offsets[a];
            let jt_omega = ja.transpose() * &l.information;
            let ga = ja.transpose() * &weighted_r;
            let mut seg = g.rows_mut(oa, ga.len());
            seg += &ga;
            for (b, jb) in &l.jacobians {
                let ob = layout.offsets[b];
                let block = &jt_omega * jb;
                for c in 0..block.ncols() {
                    for r in 0..block.nrows() {
                        let v = block[(r, c)];
                        if v != 0.0 {
                            coo.push(oa + r, ob + c, v);
                        }
                    }
                }
            }
        }
    }
    let h = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&h).map_err(|e| OptimizerError::SingularSystem(format!("normal equations not positive definite: {e}")))?;
    let delta = chol.solve(&(-g));
    let delta = delta.column(0).into_owned();
    if !delta.iter().all(|v| v.is_finite()) {
        return Err(OptimizerError::SingularSystem("non-finite update".into()));
    }
    Ok(delta)
}

fn apply(values: &BTreeMap<NodeId, NodeValue>, layout: &Layout, delta: &DVector<f64>, scale: f64) -> BTreeMap<NodeId, NodeValue> {
    let mut out = values.clone();
    for id in &layout.order {
        let v = &values[id];
        let o = layout.offsets[id];
        let d: Vec<f64> = delta.rows(o, dim(v)).iter().map(|x| x * scale).collect();
        out.insert(*id, retract(v, &d));
    }
    out
}

/// Optimizes the active part of `graph` in place. On `SingularSystem` the
/// estimates are left untouched.
pub fn optimize(graph: &mut PoseGraph, params: &OptimizerParams) -> Result<OptimizationReport, OptimizerError> {
    let factors: Vec<Factor> = graph.active_edges().map(|(_, e)| e.factor.clone()).collect();
    let refs: Vec<&Factor> = factors.iter().collect();
    let mut values = graph.estimates();
    let layout = layout(&refs, &values)?;
    let initial_error = error_of(&refs, &values)?;
    let mut error = initial_error;
    let mut history = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    if layout.size > 0 {
        while iterations < params.max_iterations {
            let delta = solve(&refs, &values, &layout)?;
            iterations += 1;
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=params.max_step_halvings {
                let candidate = apply(&values, &layout, &delta, scale);
                let e = error_of(&refs, &candidate)?;
                if e <= error {
                    accepted = Some((candidate, e));
                    break;
                }
                scale *= 0.5;
            }
            let Some((candidate, e)) = accepted else {
                // Numerical floor: a vanishing step that cannot decrease the error.
                termination = if delta.amax() < 1e-10 || error == 0.0 { Termination::Converged } else { Termination::NonDecreasing };
                break;
            };
            let decrease = error - e;
            values = candidate;
            history.push(e);
            let previous = error;
            error = e;
            if previous == 0.0 || decrease / previous < params.relative_tolerance {
                termination = Termination::Converged;
                break;
            }
        }
        let updates: Vec<(NodeId, NodeValue)> = layout.order.iter().map(|id| (*id, values[id])).collect();
        graph
            .set_estimates(updates.iter().map(|(k, v)| (k, v)))
            .map_err(|e| OptimizerError::SingularSystem(e.to_string()))?;
    } else {
        termination = Termination::Converged;
    }
    Ok(OptimizationReport { initial_error, final_error: error, iterations, termination, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rot3;
    use crate::posegraph::{isotropic_information3, odometry_information, EdgeKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, angle: f64, trans: f64) -> Pose3 {
        Pose3::new(
            Rot3::from_rpy(rng.random_range(-angle..angle), rng.random_range(-angle..angle), rng.random_range(-angle..angle)),
            Vec3::new(rng.random_range(-trans..trans), rng.random_range(-trans..trans), rng.random_range(-trans..trans)),
        )
    }

    fn random_info6(rng: &mut ChaCha8Rng) -> nalgebra::Matrix6<f64> {
        let a = nalgebra::Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + nalgebra::Matrix6::identity()
    }

    /// Central differences of the whitened residual with respect to the
    /// retraction of each variable.
    fn numeric_jacobian(factor: &Factor, values: &BTreeMap<NodeId, NodeValue>, id: NodeId) -> DMatrix<f64> {
        let h = 1e-6;
        let n = dim(&values[&id]);
        let (r0, _) = residual(factor, values).unwrap();
        let mut j = DMatrix::zeros(r0.len(), n);
        for k in 0..n {
            let mut d = vec![0.0; n];
            d[k] = h;
            let mut plus = values.clone();
            plus.insert(id, retract(&values[&id], &d));
            d[k] = -h;
            let mut minus = values.clone();
            minus.insert(id, retract(&values[&id], &d));
            let col = (residual(factor, &plus).unwrap().0 - residual(factor, &minus).unwrap().0) / (2.0 * h);
            j.set_column(k, &col);
        }
        j
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = NodeId::robot(0, 0);
        let b = NodeId::robot(0, 5);
        let p = NodeId::artifact(0);
        for _ in 0..100 {
            let mut values = BTreeMap::new();
            values.insert(a, NodeValue::Pose(random_pose(&mut rng, 3.0, 10.0)));
            values.insert(b, NodeValue::Pose(random_pose(&mut rng, 3.0, 10.0)));
            values.insert(p, NodeValue::Point(Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))));
            let factors = [
                Factor::Between { from: a, to: b, measurement: random_pose(&mut rng, 3.0, 10.0), information: random_info6(&mut rng) },
                Factor::Observation { pose: a, point: p, measurement: Vec3::new(1.0, -2.0, 0.5), information: isotropic_information3(0.3) },
                Factor::PosePrior { node: b, measurement: random_pose(&mut rng, 3.0, 10.0), information: random_info6(&mut rng) },
                Factor::PointPrior { node: p, measurement: Vec3::new(0.3, 0.2, 0.1), information: Mat3::identity() },
            ];
            for f in &factors {
                let lin = linearize(f, &values).unwrap();
                for (id, ja) in &lin.jacobians {
                    let jn = numeric_jacobian(f, &values, *id);
                    let err = (ja - &jn).norm() / ja.norm().max(1.0);
                    assert!(err < 1e-5, "{f:?} wrt {id}: relative error {err}");
                }
            }
        }
    }

    fn loop_graph(n: u32, rng: Option<&mut ChaCha8Rng>) -> (PoseGraph, Vec<Pose3>) {
        let truth: Vec<Pose3> = (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                Pose3::new(Rot3::rz(a + std::f64::consts::FRAC_PI_2), Vec3::new(10.0 * a.cos(), 10.0 * a.sin(), 0.1 * (3.0 * a).sin()))
            })
            .collect();
        let mut g = PoseGraph::new();
        let mut rng = rng;
        let mut measured = Vec::new();
        for i in 0..n as usize {
            let j = (i + 1) % n as usize;
            let mut z = truth[i].between(&truth[j]);
            if let Some(r) = rng.as_deref_mut() {
                let d = nalgebra::Vector6::new(
                    r.random::<f64>() * 0.02 - 0.01,
                    r.random::<f64>() * 0.02 - 0.01,
                    r.random::<f64>() * 0.02 - 0.01,
                    r.random::<f64>() * 0.1 - 0.05,
                    r.random::<f64>() * 0.1 - 0.05,
                    r.random::<f64>() * 0.1 - 0.05,
                );
                z = z.compose(&Pose3::exp_vector(&d));
            }
            measured.push(z);
        }
        let mut est = truth[0];
        for (i, z) in measured.iter().enumerate().take(n as usize - 1) {
            g.add_pose(NodeId::robot(0, i as u32), est).unwrap();
            est = est.compose(z);
        }
        g.add_pose(NodeId::robot(0, n - 1), est).unwrap();
        for i in 0..n - 1 {
            g.add_odometry(NodeId::robot(0, i), NodeId::robot(0, i + 1), measured[i as usize], odometry_information()).unwrap();
        }
        g.add_loop_closure(NodeId::robot(0, n - 1), NodeId::robot(0, 0), measured[n as usize - 1], odometry_information()).unwrap();
        g.add_pose_prior(NodeId::robot(0, 0), truth[0], odometry_information() * 100.0).unwrap();
        (g, truth)
    }

    #[test]
    fn noiseless_loop_recovers_ground_truth() {
        let (mut g, truth) = loop_graph(20, None);
        // Scramble the estimates to make the solve non-trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 1..20 {
            let id = NodeId::robot(0, i);
            let p = g.pose(&id).unwrap().compose(&random_pose(&mut rng, 0.1, 0.5));
            g.set_pose(id, p).unwrap();
        }
        let report = optimize(&mut g, &OptimizerParams::default()).unwrap();
        assert_eq!(report.termination, Termination::Converged);
        for (i, t) in truth.iter().enumerate() {
            let (dr, dt) = crate::geodesic_distances(&g.pose(&NodeId::robot(0, i as u32)).unwrap(), t);
            assert!(dt < 1e-6 && dr < 1e-8, "pose {i}: {dt} m {dr} rad");
        }
    }

    #[test]
    fn noisy_loop_error_decreases_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut g, _) = loop_graph(20, Some(&mut rng));
        let report = optimize(&mut g, &OptimizerParams::default()).unwrap();
        assert!(report.final_error <= report.initial_error);
        let mut prev = report.initial_error;
        for e in &report.history {
            assert!(*e <= prev);
            prev = *e;
        }
    }

    #[test]
    fn missing_prior_is_singular_and_leaves_estimates() {
        let (mut g, _) = loop_graph(10, None);
        let prior = g.edges_of_kind(EdgeKind::PriorPose).next().unwrap().0;
        g.set_active(prior, false).unwrap();
        let before = g.estimates();
        assert!(matches!(optimize(&mut g, &OptimizerParams::default()), Err(OptimizerError::SingularSystem(_))));
        assert_eq!(g.estimates(), before);
    }

    #[test]
    fn gauge_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (g0, truth) = loop_graph(15, Some(&mut rng));
        let mut a = g0.clone();
        optimize(&mut a, &OptimizerParams::default()).unwrap();

        // Move the anchor and the initial estimates by a rigid motion.
        let m = Pose3::new(Rot3::from_rpy(0.2, -0.1, 1.3), Vec3::new(5.0, -3.0, 2.0));
        let mut b = PoseGraph::new();
        for (id, p) in g0.robot_poses(0) {
            b.add_pose(id, m.compose(&p)).unwrap();
        }
        for e in g0.edges() {
            match &e.factor {
                Factor::Between { from, to, measurement, information } => {
                    if e.kind == EdgeKind::Odometry {
                        b.add_odometry(*from, *to, *measurement, *information).unwrap();
                    } else {
                        b.add_loop_closure(*from, *to, *measurement, *information).unwrap();
                    }
                }
                Factor::PosePrior { node, information, .. } => {
                    b.add_pose_prior(*node, m.compose(&truth[0]), *information).unwrap();
                }
                _ => unreachable!(),
            }
        }
        optimize(&mut b, &OptimizerParams::default()).unwrap();
        for (id, pa) in a.robot_poses(0) {
            let pb = b.pose(&id).unwrap();
            let (dr, dt) = crate::geodesic_distances(&m.compose(&pa), &pb);
            assert!(dr < 1e-9 && dt < 1e-9, "{id}: {dr} {dt}");
        }
    }

    #[test]
    fn artifacts_are_optimized() {
        let (mut g, truth) = loop_graph(12, None);
        let a = Vec3::new(10.0, 1.0, 0.5);
        for i in [0u32, 1, 11] {
            let z = truth[i as usize].inverse_transform_point(&a);
            g.add_artifact_observation(NodeId::robot(0, i), NodeId::artifact(0), z, isotropic_information3(0.3)).unwrap();
        }
        g.set_estimates([(&NodeId::artifact(0), &NodeValue::Point(a + Vec3::new(0.5, -0.5, 0.2)))]).unwrap();
        optimize(&mut g, &OptimizerParams::default()).unwrap();
        assert!((g.point(&NodeId::artifact(0)).unwrap() - a).norm() < 1e-6);
    }
}
