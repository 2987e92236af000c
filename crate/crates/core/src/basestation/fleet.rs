//! Drives several robot mappers and a base station over a dataset, with
//! periodic payload exchange through a [`CommBus`].

use super::{Basestation, BasestationConfig, BasestationError, CommBus, GroundTruth, IntegrationReport};
use crate::pipeline::{PipelineConfig, PipelineError, RobotMapper};
use crate::posegraph::NodeId;
use crate::sim::Dataset;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub pipeline: PipelineConfig,
    pub basestation: BasestationConfig,
    /// Scans each robot processes between payload exchanges.
    pub sync_every: usize,
    /// Exchange rounds after the last scan to get every payload through.
    pub max_final_rounds: usize,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self { pipeline: PipelineConfig::default(), basestation: BasestationConfig::default(), sync_every: 50, max_final_rounds: 50 }
    }
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Basestation(#[from] BasestationError),
    #[error("payloads still missing after {0} final exchange rounds")]
    Undelivered(usize),
}

pub struct FleetRun {
    pub robots: Vec<RobotMapper>,
    pub basestation: Basestation,
    pub reports: Vec<IntegrationReport>,
    pub sent: usize,
    pub dropped: usize,
}

/// Ground truth of every key and artifact, for base-station metrics.
pub fn key_ground_truth(dataset: &Dataset, robots: &[RobotMapper]) -> GroundTruth {
    let mut truth = GroundTruth::default();
    for m in robots {
        let Some(gt) = dataset.robot(m.robot).and_then(|t| t.ground_truth.as_ref()) else { continue };
        for k in m.keys() {
            truth.poses.insert(k.id, gt[k.scan_index]);
        }
    }
    for a in &dataset.artifacts {
        truth.artifacts.insert(NodeId::artifact(a.id), a.position);
    }
    truth
}

pub fn run_fleet(dataset: &Dataset, cfg: &FleetConfig) -> Result<FleetRun, FleetError> {
    let mut robots = dataset
        .robots
        .iter()
        .map(|t| RobotMapper::new(t, &dataset.outliers, cfg.pipeline.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut base = Basestation::new(cfg.basestation.clone());
    let mut bus = CommBus::new(cfg.basestation.comm.clone());
    let mut reports = Vec::new();
    let step = cfg.sync_every.max(1);
    let longest = dataset.robots.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut tick = 0u64;

    let mut exchange = |robots: &[RobotMapper], base: &mut Basestation, bus: &mut CommBus, tick: u64| -> Result<(), FleetError> {
        for m in robots {
            let acked = base.robot_revision(m.robot);
            if m.graph.revision() > acked {
                bus.send(tick, m.payload(acked).marshal());
            }
        }
        let delivered = bus.deliver(tick);
        if !delivered.is_empty() {
            reports.push(base.ingest_batch(delivered.iter().map(Vec::as_slice))?);
        }
        Ok(())
    };

    let mut start = 0;
    while start < longest {
        let end = start + step;
        robots
            .par_iter_mut()
            .zip(dataset.robots.par_iter())
            .try_for_each(|(m, track)| m.process_scans(dataset, track, start..end.min(track.len())))?;
        if end >= longest {
            robots.par_iter_mut().try_for_each(|m| m.optimize())?;
        }
        exchange(&robots, &mut base, &mut bus, tick)?;
        tick += 1;
        start = end;
    }
    let mut rounds = 0;
    while robots.iter().any(|m| base.robot_revision(m.robot) < m.graph.revision()) || bus.pending() > 0 {
        if rounds == cfg.max_final_rounds {
            return Err(FleetError::Undelivered(rounds));
        }
        exchange(&robots, &mut base, &mut bus, tick)?;
        tick += 1;
        rounds += 1;
    }
    base.set_ground_truth(key_ground_truth(dataset, &robots));
    Ok(FleetRun { sent: bus.sent, dropped: bus.dropped, robots, basestation: base, reports })
}
