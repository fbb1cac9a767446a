use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{SimConfig, SCHEMA_VERSION};
use super::run::{run_to_dir, RunSummary};
use super::{io_err, ExperimentError};

/// One (volume, penetration, seed) run of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub volume: f64,
    pub penetration: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub summary: Option<RunSummary>,
    /// Why the run produced no summary.
    pub error: Option<String>,
}

impl SweepRun {
    fn travel_time(&self) -> Option<f64> {
        self.summary.as_ref().filter(|s| s.audit_error.is_none()).and_then(|s| s.metrics.all.avg_travel_time)
    }
}

/// Seed-aggregated statistics of one (volume, penetration) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub volume: f64,
    pub penetration: f64,
    pub runs: usize,
    pub failed_runs: usize,
    pub audit_failures: usize,
    pub mean_travel_time: Option<f64>,
    /// 95% normal half-width over seeds.
    pub half_width: Option<f64>,
    pub cav_travel_time: Option<f64>,
    pub hdv_travel_time: Option<f64>,
    pub replan_events: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<SweepRun>,
    /// Volumes where the mean travel time rises with penetration.
    pub warnings: Vec<String>,
}

impl SweepSummary {
    pub fn cell(&self, volume: f64, penetration: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.volume == volume && c.penetration == penetration)
    }

    pub fn total_audit_failures(&self) -> usize {
        self.cells.iter().map(|c| c.audit_failures).sum()
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn half_width(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let m = mean(xs)?;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(1.96 * (var / n as f64).sqrt())
}

fn cell_dir(root: &Path, volume: f64, penetration: f64, seed: u64) -> PathBuf {
    root.join(format!("v{volume:.0}_p{:03.0}_s{seed}", penetration * 100.0))
}

fn run_cell(cfg: &SimConfig, dir: &Path) -> Result<RunSummary, String> {
    match catch_unwind(AssertUnwindSafe(|| run_to_dir(cfg, dir))) {
        Ok(Ok(out)) => Ok(out.summary),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3}")).unwrap_or_default()
}

/// Runs the volume x penetration x seed grid under `out`.
///
/// Each run gets its own directory. The first seed of every cell also keeps
/// a decimated trajectory file for position and speed fans. A failing run is
/// recorded and the rest of the grid continues.
pub fn sweep(cfg: &SimConfig, out: &Path) -> Result<SweepSummary, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let s = &cfg.sweep;
    let mut jobs = Vec::new();
    for &volume in &s.volumes {
        for &penetration in &s.penetrations {
            for k in 0..s.seeds {
                let mut c = cfg.clone();
                c.traffic.volume = volume;
                c.traffic.penetration = penetration;
                c.run.seed = cfg.run.seed + k;
                c.output.trajectories = k == 0;
                c.output.trajectory_stride = s.fan_stride;
                c.output.dir = cell_dir(out, volume, penetration, c.run.seed);
                jobs.push(c);
            }
        }
    }
    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|c| {
            let res = run_cell(c, &c.output.dir);
            SweepRun {
                volume: c.traffic.volume,
                penetration: c.traffic.penetration,
                seed: c.run.seed,
                dir: c.output.dir.clone(),
                error: res.as_ref().err().cloned(),
                summary: res.ok(),
            }
        })
        .collect();

    let mut cells = Vec::new();
    for &volume in &s.volumes {
        for &penetration in &s.penetrations {
            let group: Vec<&SweepRun> =
                runs.iter().filter(|r| r.volume == volume && r.penetration == penetration).collect();
            let tt: Vec<f64> = group.iter().filter_map(|r| r.travel_time()).collect();
            let sub = |f: fn(&RunSummary) -> Option<f64>| {
                mean(&group.iter().filter_map(|r| r.summary.as_ref().and_then(f)).collect::<Vec<_>>())
            };
            let ok: Vec<&RunSummary> = group.iter().filter_map(|r| r.summary.as_ref()).collect();
            cells.push(CellSummary {
                volume,
                penetration,
                runs: group.len(),
                failed_runs: group.iter().filter(|r| r.travel_time().is_none()).count(),
                audit_failures: ok
                    .iter()
                    .map(|s| s.metrics.audit_failure_count.max(usize::from(s.audit_error.is_some())))
                    .sum(),
                mean_travel_time: mean(&tt),
                half_width: half_width(&tt),
                cav_travel_time: sub(|s| s.metrics.cav.avg_travel_time),
                hdv_travel_time: sub(|s| s.metrics.hdv.avg_travel_time),
                replan_events: mean(&ok.iter().map(|s| s.metrics.replan_event_count as f64).collect::<Vec<_>>())
                    .unwrap_or(0.0),
            });
        }
    }

    let mut warnings = Vec::new();
    for &volume in &s.volumes {
        let row: Vec<&CellSummary> = cells.iter().filter(|c| c.volume == volume).collect();
        for pair in row.windows(2) {
            if let (Some(a), Some(b)) = (pair[0].mean_travel_time, pair[1].mean_travel_time) {
                if b > a {
                    warnings.push(format!(
                        "{volume} veh/h: travel time rises from {a:.2} s at {:.0}% to {b:.2} s at {:.0}%",
                        pair[0].penetration * 100.0,
                        pair[1].penetration * 100.0
                    ));
                }
            }
        }
    }

    let summary = SweepSummary { schema_version: SCHEMA_VERSION, cells, runs, warnings };
    write_tables(&summary, &s.volumes, &s.penetrations, out)?;
    Ok(summary)
}

fn write_tables(summary: &SweepSummary, volumes: &[f64], pens: &[f64], out: &Path) -> Result<(), ExperimentError> {
    let mut table = String::from("volume_vph");
    for p in pens {
        let _ = write!(table, ",{:.0}%", p * 100.0);
    }
    table.push('\n');
    for &v in volumes {
        let _ = write!(table, "{v:.0}");
        for &p in pens {
            let _ = write!(table, ",{}", fmt_opt(summary.cell(v, p).and_then(|c| c.mean_travel_time)));
        }
        table.push('\n');
    }
    let path = out.join("table.csv");
    fs::write(&path, table).map_err(io_err(&path))?;

    let mut cells = String::from(
        "volume_vph,penetration,runs,failed_runs,audit_failures,mean_travel_time,half_width,cav_travel_time,hdv_travel_time,replan_events\n",
    );
    for c in &summary.cells {
        let _ = writeln!(
            cells,
            "{:.0},{},{},{},{},{},{},{},{},{:.2}",
            c.volume,
            c.penetration,
            c.runs,
            c.failed_runs,
            c.audit_failures,
            fmt_opt(c.mean_travel_time),
            fmt_opt(c.half_width),
            fmt_opt(c.cav_travel_time),
            fmt_opt(c.hdv_travel_time),
            c.replan_events
        );
    }
    let path = out.join("cells.csv");
    fs::write(&path, cells).map_err(io_err(&path))?;

    let path = out.join("summary.json");
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}
