//! Batch entry points behind the `lamp` and `lamp-sim` binaries.
//!
//! `lamp run <dataset>` writes into its output directory:
//!
//! - `metrics.json`, a [`RunMetrics`] document
//! - `graph.g2o`, the merged and optimized pose graph
//! - `map.ply`, the fused point cloud map
//! - `trajectory_robot<N>.txt`, one line per key: `timestamp x y z qx qy qz qw`
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use lamp_core::basestation::{run_fleet, BasestationMetrics, FleetConfig, FleetError};
use lamp_core::icm::{Icm, IcmError, IcmThresholds, LoopClosure, Verdict};
use lamp_core::optimizer::{optimize, OptimizationReport, OptimizerError, OptimizerParams};
use lamp_core::pointcloud::ply;
use lamp_core::posegraph::g2o::{read_g2o, write_g2o, G2oError};
use lamp_core::posegraph::{EdgeKind, Factor, GraphError, NodeValue, PoseGraph};
use lamp_core::sim::{Dataset, DatasetError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        data(e)
    }
}

impl From<FleetError> for CliError {
    fn from(e: FleetError) -> Self {
        data(e)
    }
}

impl From<G2oError> for CliError {
    fn from(e: G2oError) -> Self {
        data(e)
    }
}

impl From<OptimizerError> for CliError {
    fn from(e: OptimizerError) -> Self {
        data(e)
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        data(e)
    }
}

impl From<IcmError> for CliError {
    fn from(e: IcmError) -> Self {
        data(e)
    }
}

/// Reads a run configuration (YAML, every field optional).
pub fn load_config(path: &Path) -> Result<FleetConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_yaml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub dataset: String,
    pub loop_closure: bool,
    pub icm: bool,
    pub scans: usize,
    pub keys: usize,
    /// Per-robot and fleet errors against ground truth when the dataset has it.
    pub basestation: BasestationMetrics,
}

pub struct RunOptions {
    pub config: FleetConfig,
    pub no_loop_closure: bool,
    pub no_icm: bool,
    pub out: PathBuf,
}

/// Maps every robot of the dataset in `dir`, merges at a base station and
/// writes the outputs to `opts.out`.
pub fn run(dir: &Path, opts: &RunOptions) -> Result<RunMetrics, CliError> {
    let mut cfg = opts.config.clone();
    if opts.no_loop_closure {
        cfg.pipeline.loop_closure = false;
        cfg.basestation.inter_robot_closures = false;
    }
    if opts.no_icm {
        cfg.pipeline.icm = false;
        cfg.basestation.icm = false;
    }
    let dataset = Dataset::load(dir)?;
    let fleet = run_fleet(&dataset, &cfg)?;
    let base = &fleet.basestation;
    let metrics = RunMetrics {
        dataset: dataset.name.clone(),
        loop_closure: cfg.pipeline.loop_closure,
        icm: cfg.pipeline.icm,
        scans: dataset.robots.iter().map(|t| t.len()).sum(),
        keys: fleet.robots.iter().map(|m| m.keys().len()).sum(),
        basestation: base.metrics(),
    };

    let out = &opts.out;
    std::fs::create_dir_all(out).map_err(|e| data(format!("{}: {e}", out.display())))?;
    let write = |name: &str, text: &str| std::fs::write(out.join(name), text).map_err(|e| data(format!("{}: {e}", out.join(name).display())));
    write("metrics.json", &(serde_json::to_string_pretty(&metrics).expect("serializable") + "\n"))?;
    write("graph.g2o", &write_g2o(base.graph()))?;
    write("map.ply", &ply::to_ply_string(&base.export_map(Some(cfg.basestation.map_leaf))))?;
    for m in &fleet.robots {
        let mut text = String::new();
        for k in m.keys() {
            if let Some(p) = base.graph().pose(&k.id) {
                let [x, y, z, qx, qy, qz, qw] = p.to_g2o();
                let _ = writeln!(text, "{} {x} {y} {z} {qx} {qy} {qz} {qw}", k.timestamp);
            }
        }
        write(&format!("trajectory_robot{}.txt", m.robot), &text)?;
    }
    Ok(metrics)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub loop_closures: usize,
    pub rejected: usize,
    pub report: Option<OptimizationReport>,
}

/// Optimizes a g2o graph. With `icm`, every loop closure is re-checked from
/// scratch in file order: intra-robot closures with the single-robot
/// thresholds, closures between robots with the multi-robot ones. Rejected
/// closures stay in the graph, inactive.
pub fn optimize_g2o(text: &str, icm: bool, params: &OptimizerParams) -> Result<(PoseGraph, OptimizeSummary), CliError> {
    let input = read_g2o(text)?;
    let mut summary = OptimizeSummary::default();
    let mut graph = if icm {
        let mut g = PoseGraph::new();
        for (id, node) in input.nodes() {
            match node.value {
                NodeValue::Pose(p) => g.add_pose(*id, p)?,
                NodeValue::Point(p) => g.add_point(*id, p)?,
            };
        }
        let mut closures = Vec::new();
        for e in input.edges() {
            match (&e.kind, &e.factor) {
                (EdgeKind::LoopClosure, Factor::Between { from, to, measurement, information }) => closures.push((LoopClosure::new(*from, *to, *measurement), *information)),
                (EdgeKind::Odometry, Factor::Between { from, to, measurement, information }) => {
                    let id = g.add_odometry(*from, *to, *measurement, *information)?;
                    g.set_active(id, e.active)?;
                }
                (EdgeKind::ArtifactObservation, Factor::Observation { pose, point, measurement, information }) => {
                    let id = g.add_artifact_observation(*pose, *point, *measurement, *information)?;
                    g.set_active(id, e.active)?;
                }
                (EdgeKind::PriorPose, Factor::PosePrior { node, measurement, information }) => {
                    let id = g.add_pose_prior(*node, *measurement, *information)?;
                    g.set_active(id, e.active)?;
                }
                (EdgeKind::PriorPoint, Factor::PointPrior { node, measurement, information }) => {
                    let id = g.add_point_prior(*node, *measurement, *information)?;
                    g.set_active(id, e.active)?;
                }
                (kind, _) => return Err(data(format!("edge kind {kind:?} does not match its factor"))),
            }
        }
        let mut intra = Icm::new(IcmThresholds::SINGLE_ROBOT);
        let mut inter = Icm::new(IcmThresholds::MULTI_ROBOT);
        for (lc, info) in closures {
            let icm = if lc.from.robot_id() == lc.to.robot_id() { &mut intra } else { &mut inter };
            if let Verdict::RejectedOdometry { .. } = icm.submit(&mut g, lc, info)?.verdict {
                let id = g.add_loop_closure(lc.from, lc.to, lc.measurement, info)?;
                g.set_active(id, false)?;
            }
            summary.loop_closures += 1;
        }
        summary.rejected = g.edges_of_kind(EdgeKind::LoopClosure).filter(|(_, e)| !e.active).count();
        g
    } else {
        summary.loop_closures = input.edges_of_kind(EdgeKind::LoopClosure).count();
        summary.rejected = input.edges_of_kind(EdgeKind::LoopClosure).filter(|(_, e)| !e.active).count();
        input
    };
    summary.report = Some(optimize(&mut graph, params)?);
    Ok((graph, summary))
}

/// Writes `graph` as g2o to `out`, or to stdout when `out` is `None`.
pub fn emit_g2o(graph: &PoseGraph, out: Option<&Path>) -> Result<(), CliError> {
    let text = write_g2o(graph);
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
