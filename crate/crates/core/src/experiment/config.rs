use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::planner::{PlanMode, PlannerParams};
use crate::sim::{AccParams, DriftSegment, DriverGains, ScenarioGeometry, ScriptedArrival, SimParams};

/// Bumped whenever an emitted file changes shape.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Measurement window length, s.
    pub duration: f64,
    /// Simulated time before measurement starts, s.
    pub warmup: f64,
    pub seed: u64,
    pub mode: PlanMode,
    pub replanning: bool,
    pub dt: f64,
    /// Abort at the first collision-audit failure.
    pub abort_on_audit: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            duration: 500.0,
            warmup: 60.0,
            seed: 1,
            mode: PlanMode::Stochastic,
            replanning: true,
            dt: 0.1,
            abort_on_audit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficSection {
    /// Total arrivals over both roads, veh/h; split evenly.
    pub volume: f64,
    /// Fraction of arrivals that are CAVs.
    pub penetration: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for TrafficSection {
    fn default() -> Self {
        Self { volume: 1200.0, penetration: 0.6, speed_min: 10.0, speed_max: 25.0, tau_min: 1.2, tau_max: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Confidence level of the detection interval.
    pub zeta: f64,
    /// Training samples per HDV model.
    pub horizon: usize,
    /// Congestion wave speed, m/s; derived from the volume when absent.
    pub wave_speed: Option<f64>,
    /// Fitted time shift above which an HDV counts as free-flowing, s.
    pub free_flow_tau: f64,
    pub tau_noise_std: f64,
    pub tau_noise_rate: f64,
    pub driver: DriverGains,
    pub acc: AccParams,
}

impl Default for ModelSection {
    fn default() -> Self {
        let sim = SimParams::default();
        Self {
            zeta: sim.zeta,
            horizon: sim.horizon,
            wave_speed: None,
            free_flow_tau: sim.free_flow_tau,
            tau_noise_std: sim.tau_noise_std,
            tau_noise_rate: sim.tau_noise_rate,
            driver: DriverGains::default(),
            acc: AccParams::default(),
        }
    }
}

/// Time-shift drift applied to the HDV with spawn serial `vehicle`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftScript {
    pub vehicle: u64,
    pub start: f64,
    pub end: f64,
    pub delta_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub trajectories: bool,
    /// Write every n-th step to the trajectory file.
    pub trajectory_stride: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), trajectories: true, trajectory_stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub volumes: Vec<f64>,
    pub penetrations: Vec<f64>,
    /// Seeds per cell, counting up from `run.seed`.
    pub seeds: u64,
    /// Step stride of the per-vehicle fan series (first seed of each cell).
    pub fan_stride: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            volumes: vec![800.0, 1000.0, 1200.0],
            penetrations: vec![0.0, 0.4, 0.6, 0.8, 1.0],
            seeds: 5,
            fan_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub run: RunSection,
    pub traffic: TrafficSection,
    pub geometry: ScenarioGeometry,
    pub params: PlannerParams,
    pub model: ModelSection,
    pub arrivals: Vec<ScriptedArrival>,
    pub drift: Vec<DriftScript>,
    pub output: OutputSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: SimConfig,
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        toml::from_str(s).map_err(|e| e.to_string())
    }

    /// Reads a TOML config, or the config embedded in a run manifest when
    /// the file has a `.json` extension.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: Manifest = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            Ok(m.config)
        } else {
            Self::from_toml_str(&text).map_err(|e| format!("{}: {e}", path.display()))
        }
    }

    /// Congestion wave speed from the 10 m standstill-spacing rule.
    pub fn wave_speed(&self) -> f64 {
        self.model.wave_speed.unwrap_or(10.0 * self.traffic.volume / 3600.0)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.run;
        if !(r.duration > 0.0 && r.duration.is_finite()) {
            return Err(err("run.duration", format!("must be positive, got {}", r.duration)));
        }
        if !(r.warmup >= 0.0 && r.warmup.is_finite()) {
            return Err(err("run.warmup", format!("must be non-negative, got {}", r.warmup)));
        }
        if !(r.dt > 0.0 && r.dt <= 1.0) {
            return Err(err("run.dt", format!("must lie in (0, 1], got {}", r.dt)));
        }
        let t = &self.traffic;
        if !(t.volume >= 0.0 && t.volume.is_finite()) {
            return Err(err("traffic.volume", format!("must be non-negative, got {}", t.volume)));
        }
        if !(0.0..=1.0).contains(&t.penetration) {
            return Err(err("traffic.penetration", format!("must lie in [0, 1], got {}", t.penetration)));
        }
        self.params.validate().map_err(|m| err("params", m))?;
        self.geometry.validate().map_err(|m| err("geometry", m))?;
        let p = &self.params;
        if !(t.speed_min >= p.v_min && t.speed_max <= p.v_max && t.speed_min <= t.speed_max) {
            return Err(err(
                "traffic.speed_min",
                format!(
                    "entry speeds [{}, {}] must be ordered and inside [v_min, v_max] = [{}, {}]",
                    t.speed_min, t.speed_max, p.v_min, p.v_max
                ),
            ));
        }
        if !(t.tau_min > 0.0 && t.tau_min <= t.tau_max) {
            return Err(err("traffic.tau_min", format!("need 0 < tau_min <= tau_max, got {} / {}", t.tau_min, t.tau_max)));
        }
        let m = &self.model;
        if !(m.zeta > 0.0 && m.zeta < 1.0) {
            return Err(err("model.zeta", format!("must lie in (0, 1), got {}", m.zeta)));
        }
        if m.horizon < 2 {
            return Err(err("model.horizon", format!("needs at least 2 samples, got {}", m.horizon)));
        }
        if !(m.free_flow_tau >= t.tau_max) {
            return Err(err(
                "model.free_flow_tau",
                format!("must be at least traffic.tau_max ({}), got {}", t.tau_max, m.free_flow_tau),
            ));
        }
        if !(m.tau_noise_std >= 0.0 && m.tau_noise_rate > 0.0) {
            return Err(err("model.tau_noise_std", "noise std must be non-negative and rate positive"));
        }
        let w = self.wave_speed();
        if !(w > 0.0 && w.is_finite()) {
            return Err(err("model.wave_speed", format!("must be positive, got {w}; set it when traffic.volume = 0")));
        }
        let tau_reach = self
            .arrivals
            .iter()
            .map(|a| a.desired_tau)
            .chain([t.tau_max])
            .fold(0.0, f64::max)
            + self.drift.iter().map(|d| d.delta_tau.max(0.0)).sum::<f64>();
        let room = self.geometry.p_exit - self.geometry.p_merge;
        if w * tau_reach > room {
            return Err(err(
                "model.wave_speed",
                format!("w * tau = {:.1} m exceeds the {room} m between merge and exit", w * tau_reach),
            ));
        }
        for (i, a) in self.arrivals.iter().enumerate() {
            if !(a.time >= 0.0 && a.speed >= 0.0 && a.speed <= p.v_max && a.desired_tau > 0.0) {
                return Err(err(&format!("arrivals[{i}]"), "needs time >= 0, speed in [0, v_max] and desired_tau > 0"));
            }
        }
        for (i, d) in self.drift.iter().enumerate() {
            if !(d.end >= d.start && d.vehicle > 0) {
                return Err(err(&format!("drift[{i}]"), "needs end >= start and a vehicle serial >= 1"));
            }
        }
        if self.output.trajectory_stride == 0 {
            return Err(err("output.trajectory_stride", "must be at least 1"));
        }
        let s = &self.sweep;
        if s.seeds == 0 || s.volumes.is_empty() || s.penetrations.is_empty() {
            return Err(err("sweep", "needs at least one volume, penetration and seed"));
        }
        if s.penetrations.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(err("sweep.penetrations", "values must lie in [0, 1]"));
        }
        if s.volumes.iter().any(|v| !(*v > 0.0)) {
            return Err(err("sweep.volumes", "values must be positive"));
        }
        if s.fan_stride == 0 {
            return Err(err("sweep.fan_stride", "must be at least 1"));
        }
        Ok(())
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams {
            geometry: self.geometry,
            planner: self.params,
            mode: self.run.mode,
            replanning: self.run.replanning,
            zeta: self.model.zeta,
            horizon: self.model.horizon,
            dt: self.run.dt,
            w: self.wave_speed(),
            free_flow_tau: self.model.free_flow_tau,
            driver_gains: self.model.driver,
            tau_noise_std: self.model.tau_noise_std,
            tau_noise_rate: self.model.tau_noise_rate,
            acc: self.model.acc,
            history_capacity: SimParams::default().history_capacity,
            retry_interval: SimParams::default().retry_interval,
            abort_on_audit: self.run.abort_on_audit,
        }
    }

    pub fn drift_segments(&self) -> std::collections::BTreeMap<crate::sim::VehicleId, Vec<DriftSegment>> {
        let mut out: std::collections::BTreeMap<_, Vec<_>> = Default::default();
        for d in &self.drift {
            out.entry(crate::sim::VehicleId(d.vehicle)).or_default().push(DriftSegment {
                start: d.start,
                end: d.end,
                delta_tau: d.delta_tau,
            });
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        Manifest { schema_version: SCHEMA_VERSION, seed: self.run.seed, config: self.clone() }
    }
}
