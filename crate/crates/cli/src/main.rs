use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cav_merge::experiment::{run_to_dir, sweep, SimConfig};
use cav_merge::planner::PlanMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Merge-coordination simulator for CAVs among human-driven vehicles.
#[derive(Parser)]
#[command(name = "cav-merge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation; accepts a TOML config or a run manifest (.json).
    Run(Common),
    /// Run the volume x penetration x seed grid from a config.
    Sweep(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Det,
    Stoch,
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config and CAV_MERGE_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    no_replan: bool,
}

impl Common {
    fn resolve(&self) -> Result<(SimConfig, PathBuf)> {
        let mut cfg = SimConfig::load(&self.config).map_err(anyhow::Error::msg)?;
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.run.mode = match m {
                Mode::Det => PlanMode::Deterministic,
                Mode::Stoch => PlanMode::Stochastic,
            };
        }
        if self.no_replan {
            cfg.run.replanning = false;
        }
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os("CAV_MERGE_OUT").map(PathBuf::from))
            .unwrap_or_else(|| cfg.output.dir.clone());
        cfg.output.dir = out.clone();
        cfg.validate().context("invalid config")?;
        Ok((cfg, out))
    }
}

fn fmt_tt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.2} s"))
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let (cfg, out) = args.resolve()?;
            let res = run_to_dir(&cfg, &out)?;
            let m = &res.summary.metrics;
            println!(
                "{} vehicles measured, mean travel time {} (cav {}, hdv {}), {} replan events -> {}",
                m.all.count,
                fmt_tt(m.all.avg_travel_time),
                fmt_tt(m.cav.avg_travel_time),
                fmt_tt(m.hdv.avg_travel_time),
                m.replan_event_count,
                out.display()
            );
            if res.audit_failed() {
                eprintln!(
                    "collision audit failed: {}",
                    res.summary.audit_error.as_deref().unwrap_or("see events.jsonl")
                );
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep(args) => {
            let (cfg, out) = args.resolve()?;
            let s = sweep(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("table.csv"))?);
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            for r in s.runs.iter().filter(|r| r.error.is_some()) {
                eprintln!("run {} failed: {}", r.dir.display(), r.error.as_deref().unwrap_or_default());
            }
            if s.total_audit_failures() > 0 {
                eprintln!("collision audit failed in {} runs", s.total_audit_failures());
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
