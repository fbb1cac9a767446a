use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{SimConfig, SCHEMA_VERSION};
use super::{io_err, ExperimentError};
use crate::planner::PlanMode;
use crate::sim::{metrics, ArrivalStream, Metrics, Road, SimError, WorldState};

/// Fresh world for `cfg`; arrivals split the total volume evenly over both roads.
pub fn build_world(cfg: &SimConfig) -> WorldState {
    let t = &cfg.traffic;
    let streams = [Road::A, Road::B]
        .into_iter()
        .map(|road| {
            ArrivalStream::new(
                road,
                t.volume / 2.0,
                t.penetration,
                (t.speed_min, t.speed_max),
                (t.tau_min, t.tau_max),
                cfg.run.seed,
            )
        })
        .collect();
    WorldState::new(cfg.sim_params(), cfg.run.seed, streams, cfg.arrivals.clone(), cfg.drift_segments())
}

pub struct RunResult {
    pub world: WorldState,
    pub metrics: Metrics,
    /// Set when the run stopped early on an audit failure.
    pub error: Option<SimError>,
}

/// Runs warmup plus measurement; `observe` sees the world after every step.
pub fn simulate(cfg: &SimConfig, mut observe: impl FnMut(&WorldState)) -> RunResult {
    let mut world = build_world(cfg);
    let end = cfg.run.warmup + cfg.run.duration;
    let steps = (end / cfg.run.dt).round() as u64;
    let mut error = None;
    for _ in 0..steps {
        if let Err(e) = world.step() {
            error = Some(e);
            break;
        }
        observe(&world);
    }
    let metrics = metrics(&world, cfg.run.warmup, end);
    RunResult { world, metrics, error }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub volume: f64,
    pub penetration: f64,
    pub mode: PlanMode,
    pub replanning: bool,
    pub steps: u64,
    pub metrics: Metrics,
    pub audit_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

impl RunOutcome {
    pub fn audit_failed(&self) -> bool {
        self.summary.audit_error.is_some() || self.summary.metrics.audit_failure_count > 0
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Runs one simulation and writes its artifacts into `dir`.
///
/// An audit failure is not an error here; it is reported in the summary and
/// the state dump goes to `audit_dump.txt`.
pub fn run_to_dir(cfg: &SimConfig, dir: &Path) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("manifest.json"), &cfg.manifest())?;

    let traj_path = dir.join("trajectories.csv");
    let mut traj = if cfg.output.trajectories {
        let f = File::create(&traj_path).map_err(io_err(&traj_path))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "t,id,role,road,p,v,u").map_err(io_err(&traj_path))?;
        Some(w)
    } else {
        None
    };
    let stride = cfg.output.trajectory_stride as u64;
    let mut write_err = None;
    let result = simulate(cfg, |world| {
        let Some(w) = traj.as_mut() else { return };
        if write_err.is_some() || world.steps % stride != 0 {
            return;
        }
        for v in world.vehicles.values() {
            let r = writeln!(
                w,
                "{:.1},{},{},{:?},{:.3},{:.3},{:.3}",
                world.clock,
                v.id,
                v.role().as_str(),
                v.road,
                v.p,
                v.v,
                v.u
            );
            if let Err(e) = r {
                write_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = write_err {
        return Err(io_err(&traj_path)(e));
    }
    if let Some(mut w) = traj {
        w.flush().map_err(io_err(&traj_path))?;
    }

    let events_path = dir.join("events.jsonl");
    let mut ev = BufWriter::new(File::create(&events_path).map_err(io_err(&events_path))?);
    for e in &result.world.events {
        serde_json::to_writer(&mut ev, e)?;
        ev.write_all(b"\n").map_err(io_err(&events_path))?;
    }
    ev.flush().map_err(io_err(&events_path))?;

    let audit_error = result.error.as_ref().map(|e| e.to_string());
    if let Some(SimError::Audit { dump, .. }) = &result.error {
        let p = dir.join("audit_dump.txt");
        fs::write(&p, dump).map_err(io_err(&p))?;
    }
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        seed: cfg.run.seed,
        volume: cfg.traffic.volume,
        penetration: cfg.traffic.penetration,
        mode: cfg.run.mode,
        replanning: cfg.run.replanning,
        steps: result.world.steps,
        metrics: result.metrics,
        audit_error,
    };
    write_json(&dir.join("metrics.json"), &summary)?;
    Ok(RunOutcome { dir: dir.to_path_buf(), summary })
}
