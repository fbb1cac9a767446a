//! World state, per-step dynamics and the forecasts handed to the planner.

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::audit::{self, AuditFailure};
use super::driver::{hdv_driver_step, safe_speed, DriftSegment, DriverGains, HdvDriver, HdvDriverParams, LeaderCue};
use super::geometry::ScenarioGeometry;
use super::metrics::VehicleRecord;
use super::spawn::{ArrivalStream, ScriptedArrival, SpawnRequest};
use super::{Road, Role, VehicleId};
use crate::blr::GaussianPred;
use crate::humanmodel::{
    assign_leaders, observe_time_shift, train_time_shift_model, virtual_leader, HumanModelError, LeaderAssignment, LeaderRef,
    PositionSource, Sample, TimeShiftDist, TrajHistory, VehicleView, VIRTUAL_TAU_BAR,
};
use crate::planner::{
    certify, plan, EgoState, Forecast, Motion, NeighborSnapshot, PlanError, PlanMode, PlannedTrajectory,
    PlannerParams, Verdict,
};
use crate::polytraj::{time_at_position, AffineTraj, FreeFlowLaw, Trajectory};
use crate::replanner::{self, ReplanEvent};
use crate::uncertainty::{mean_trajectory, predict_merge_time, HdvPrediction};

const MIN_CRUISE_SPEED: f64 = 0.1;
const RECENT_SAMPLES: usize = 32;
const FALLBACK_TAU_VAR: f64 = 0.25;

/// Gap-keeping cruise control for CAVs without a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccParams {
    pub speed_gain: f64,
    pub gap_gain: f64,
    pub relative_speed_gain: f64,
    /// Extra time headway on top of the rear-end shift, s.
    pub headway_margin: f64,
}

impl Default for AccParams {
    fn default() -> Self {
        Self { speed_gain: 0.5, gap_gain: 0.25, relative_speed_gain: 0.8, headway_margin: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub geometry: ScenarioGeometry,
    pub planner: PlannerParams,
    pub mode: PlanMode,
    pub replanning: bool,
    /// Confidence level of the time-shift interval used for detection.
    pub zeta: f64,
    /// Samples per training window.
    pub horizon: usize,
    pub dt: f64,
    /// Congestion wave speed, m/s.
    pub w: f64,
    /// Fitted shifts above this mean the HDV is not following its leader,
    /// so it is modelled against its own motion instead, s.
    pub free_flow_tau: f64,
    pub driver_gains: DriverGains,
    pub tau_noise_std: f64,
    pub tau_noise_rate: f64,
    pub acc: AccParams,
    pub history_capacity: usize,
    /// Delay before a CAV without a plan tries again, s.
    pub retry_interval: f64,
    pub abort_on_audit: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            geometry: ScenarioGeometry::default(),
            planner: PlannerParams::default(),
            mode: PlanMode::Stochastic,
            replanning: true,
            zeta: 0.8,
            horizon: 20,
            dt: 0.1,
            w: 10.0 * 1200.0 / 3600.0,
            free_flow_tau: 3.5,
            driver_gains: DriverGains::default(),
            tau_noise_std: 0.05,
            tau_noise_rate: 0.5,
            acc: AccParams::default(),
            history_capacity: 256,
            retry_interval: 1.0,
            abort_on_audit: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Buffer,
    Zone,
    /// Past the control-zone exit but still on the road.
    Exited,
}

/// The stored time-shift model of one HDV.
#[derive(Debug, Clone, PartialEq)]
pub struct HdvModel {
    pub tau: TimeShiftDist,
    /// Leader assignment in force when the model was trained.
    pub assigned: LeaderRef,
    /// Trajectory the time shift is measured against when there is no
    /// usable vehicle leader.
    pub virtual_traj: Option<AffineTraj>,
}

impl HdvModel {
    /// The vehicle the model is measured against, if any.
    pub fn source_vehicle(&self) -> Option<VehicleId> {
        match (self.virtual_traj, self.assigned) {
            (None, LeaderRef::Vehicle(j)) => Some(j),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdvState {
    pub driver: HdvDriver,
    pub model: Option<HdvModel>,
    pub prediction: Option<HdvPrediction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavState {
    pub desired_speed: f64,
    pub plan: Option<PlannedTrajectory>,
    pub retry_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Kind {
    Cav(CavState),
    Hdv(HdvState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: VehicleId,
    pub road: Road,
    pub p: f64,
    pub v: f64,
    /// Acceleration held over the step that ended at the current clock.
    pub u: f64,
    /// Whether that step was integrated rather than read off a plan.
    pub integrated: bool,
    pub phase: Phase,
    pub history: TrajHistory,
    pub entry_index: Option<u64>,
    pub t_spawn: f64,
    pub t_entry: Option<f64>,
    pub t_merge: Option<f64>,
    pub t_exit: Option<f64>,
    pub kind: Kind,
}

impl Vehicle {
    pub fn role(&self) -> Role {
        match self.kind {
            Kind::Cav(_) => Role::Cav,
            Kind::Hdv(_) => Role::Hdv,
        }
    }

    pub fn cav(&self) -> Option<&CavState> {
        match &self.kind {
            Kind::Cav(c) => Some(c),
            Kind::Hdv(_) => None,
        }
    }

    pub fn hdv(&self) -> Option<&HdvState> {
        match &self.kind {
            Kind::Hdv(h) => Some(h),
            Kind::Cav(_) => None,
        }
    }

    fn cav_mut(&mut self) -> Option<&mut CavState> {
        match &mut self.kind {
            Kind::Cav(c) => Some(c),
            Kind::Hdv(_) => None,
        }
    }

    fn hdv_mut(&mut self) -> Option<&mut HdvState> {
        match &mut self.kind {
            Kind::Hdv(h) => Some(h),
            Kind::Cav(_) => None,
        }
    }

    pub fn plan(&self) -> Option<&PlannedTrajectory> {
        self.cav().and_then(|c| c.plan.as_ref())
    }

    pub fn merged(&self, p_merge: f64) -> bool {
        self.p >= p_merge
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanReason {
    Entry,
    Replan,
    Retry,
    Certify,
}

/// Run-log records.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    PlanCommit { t: f64, id: VehicleId, reason: PlanReason, t_merge: f64, t_exit: f64, extended: bool },
    PlanInfeasible { t: f64, id: VehicleId, reason: PlanReason, error: String },
    Replan(ReplanEvent),
    /// Committed plans re-checked outside a replan event, either against HDVs
    /// that just entered or against partners that only have a cruise forecast.
    Certification { t: f64, entered_hdvs: Vec<VehicleId>, replanned: Vec<VehicleId>, failed: Vec<VehicleId> },
    Audit(AuditFailure),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("collision audit failed at t = {t:.1} s: {failures:?}")]
    Audit { t: f64, failures: Vec<AuditFailure>, dump: String },
}

pub struct WorldState {
    pub clock: f64,
    pub steps: u64,
    pub params: SimParams,
    pub vehicles: BTreeMap<VehicleId, Vehicle>,
    pub leaders: BTreeMap<VehicleId, LeaderAssignment>,
    /// Vehicles that crossed the control-zone entry during the last step.
    pub entered_now: Vec<VehicleId>,
    pub records: Vec<VehicleRecord>,
    pub events: Vec<Event>,
    pub audit_failures: Vec<AuditFailure>,
    pub spawned: u64,
    streams: Vec<ArrivalStream>,
    scripted: VecDeque<SpawnRequest>,
    queues: [VecDeque<SpawnRequest>; 2],
    drift: BTreeMap<VehicleId, Vec<DriftSegment>>,
    driver_rng: ChaCha8Rng,
    next_id: u64,
    next_entry_index: u64,
}

impl WorldState {
    pub fn new(
        params: SimParams,
        seed: u64,
        streams: Vec<ArrivalStream>,
        mut scripted: Vec<ScriptedArrival>,
        drift: BTreeMap<VehicleId, Vec<DriftSegment>>,
    ) -> Self {
        scripted.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut driver_rng = ChaCha8Rng::seed_from_u64(seed);
        driver_rng.set_stream(7);
        Self {
            clock: 0.0,
            steps: 0,
            params,
            vehicles: BTreeMap::new(),
            leaders: BTreeMap::new(),
            entered_now: Vec::new(),
            records: Vec::new(),
            events: Vec::new(),
            audit_failures: Vec::new(),
            spawned: 0,
            streams,
            scripted: scripted.into_iter().map(SpawnRequest::from).collect(),
            queues: [VecDeque::new(), VecDeque::new()],
            drift,
            driver_rng,
            next_id: 1,
            next_entry_index: 0,
        }
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&Vehicle> {
        self.vehicles.get(&id)
    }

    pub fn queued(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    /// In-zone vehicles of one role in control-zone entry order.
    pub fn in_zone(&self, role: Role) -> Vec<VehicleId> {
        let mut ids: Vec<_> = self
            .vehicles
            .values()
            .filter(|v| v.phase == Phase::Zone && v.role() == role)
            .map(|v| (v.entry_index.unwrap_or(u64::MAX), v.id))
            .collect();
        ids.sort();
        ids.into_iter().map(|(_, id)| id).collect()
    }

    pub fn update_leaders(&mut self) {
        let views: Vec<VehicleView> =
            self.vehicles.values().map(|v| VehicleView { id: v.id, road: v.road, p: v.p }).collect();
        let g = &self.params.geometry;
        self.leaders = assign_leaders(&views, g.p_merge, g.proj_len);
    }

    fn assigned_leader(&self, id: VehicleId) -> Option<&Vehicle> {
        match self.leaders.get(&id)?.leader {
            LeaderRef::Vehicle(j) => self.vehicles.get(&j),
            LeaderRef::Virtual => None,
        }
    }

    // ---- spawning ----

    fn spawn_due(&mut self, t: f64) {
        for s in &mut self.streams {
            for r in s.poll(t) {
                self.queues[r.road.index()].push_back(r);
            }
        }
        while self.scripted.front().is_some_and(|r| r.t_request <= t + 1e-9) {
            let r = self.scripted.pop_front().expect("front exists");
            self.queues[r.road.index()].push_back(r);
        }
        for road in [Road::A, Road::B] {
            while let Some(req) = self.queues[road.index()].front().copied() {
                if !self.try_spawn(req, t) {
                    break;
                }
                self.queues[road.index()].pop_front();
            }
        }
    }

    fn try_spawn(&mut self, req: SpawnRequest, t: f64) -> bool {
        let pp = &self.params.planner;
        let p_spawn = self.params.geometry.spawn_position();
        let last = self
            .vehicles
            .values()
            .filter(|v| v.road == req.road && v.p < self.params.geometry.p_merge)
            .min_by(|a, b| a.p.total_cmp(&b.p));
        let mut speed = req.speed;
        if let Some(l) = last {
            let gap = l.p - p_spawn;
            if gap < pp.d_min + speed * (pp.delta_r + self.params.acc.headway_margin) {
                speed = speed.min(l.v);
            }
            if gap < pp.d_min + speed * pp.delta_r {
                return false;
            }
        }
        let id = VehicleId(self.next_id);
        self.next_id += 1;
        self.spawned += 1;
        let mut history = TrajHistory::new(self.params.history_capacity);
        history.push(Sample { t, p: p_spawn, v: speed });
        let kind = match req.role {
            Role::Cav => Kind::Cav(CavState { desired_speed: req.speed, plan: None, retry_at: None }),
            Role::Hdv => Kind::Hdv(HdvState {
                driver: HdvDriver::new(HdvDriverParams {
                    desired_tau: req.desired_tau,
                    free_speed: req.speed,
                    drift: self.drift.get(&id).cloned().unwrap_or_default(),
                    tau_noise_std: self.params.tau_noise_std,
                    tau_noise_rate: self.params.tau_noise_rate,
                }),
                model: None,
                prediction: None,
            }),
        };
        self.vehicles.insert(
            id,
            Vehicle {
                id,
                road: req.road,
                p: p_spawn,
                v: speed,
                u: 0.0,
                integrated: true,
                phase: Phase::Buffer,
                history,
                entry_index: None,
                t_spawn: t,
                t_entry: None,
                t_merge: None,
                t_exit: None,
                kind,
            },
        );
        true
    }

    // ---- dynamics ----

    fn acc_accel(&self, veh: &Vehicle, desired: f64) -> f64 {
        let pp = &self.params.planner;
        let acc = &self.params.acc;
        let mut u = acc.speed_gain * (desired - veh.v);
        let target = pp.d_min + veh.v * (pp.delta_r + acc.headway_margin);
        for l in self.assigned_leader(veh.id).into_iter().chain(self.merging_ahead(veh)) {
            let u_gap = acc.gap_gain * (l.p - veh.p - target) + acc.relative_speed_gain * (l.v - veh.v);
            let u_safe = (safe_speed(l.p - veh.p, veh.v, l.v, &self.params.driver_gains) - veh.v) / self.params.dt;
            u = u.min(u_gap).min(u_safe);
        }
        let dt = self.params.dt;
        let lo = pp.u_min.max(-veh.v / dt);
        let hi = pp.u_max.min((pp.v_max - veh.v) / dt);
        u.clamp(lo, hi.max(lo))
    }

    /// Planned CAVs on the other road that reach the merge before `veh`
    /// would at its current speed, even if they are still behind it. A CAV
    /// without a plan treats them as leaders at their projected position.
    fn merging_ahead<'a>(&'a self, veh: &'a Vehicle) -> impl Iterator<Item = &'a Vehicle> + 'a {
        let pm = self.params.geometry.p_merge;
        let eta = self.clock + (pm - veh.p) / veh.v.max(self.params.planner.v_min);
        self.vehicles.values().filter(move |c| {
            veh.p < pm
                && c.road != veh.road
                && c.p < pm
                && c.phase == Phase::Zone
                && c.plan().is_some_and(|pl| pl.t_merge < eta)
        })
    }

    /// Nearest vehicle physically ahead on the same lane of travel.
    pub fn physical_leader(&self, id: VehicleId) -> Option<&Vehicle> {
        let f = self.vehicles.get(&id)?;
        let pm = self.params.geometry.p_merge;
        self.vehicles
            .values()
            .filter(|c| c.id != id && c.p > f.p && (c.road == f.road || (c.p >= pm && f.p >= pm)))
            .min_by(|a, b| a.p.total_cmp(&b.p).then(a.id.cmp(&b.id)))
    }

    /// Advances one fixed step and runs the coordinator.
    pub fn step(&mut self) -> Result<(), SimError> {
        let t = self.clock;
        let dt = self.params.dt;
        let t1 = t + dt;
        self.spawn_due(t);
        self.update_leaders();
        let order_before = audit::physical_order(self);

        for veh in self.vehicles.values_mut() {
            if let Kind::Hdv(h) = &mut veh.kind {
                h.driver.update_noise(dt, &mut self.driver_rng);
                h.driver.relax(self.params.driver_gains.relax_rate, dt);
            }
        }
        let w = self.params.w;
        let switches: Vec<_> = self
            .vehicles
            .values()
            .filter_map(|veh| {
                let h = veh.hdv()?;
                let leader = self.assigned_leader(veh.id);
                let id = leader.map(|l| l.id);
                (id != h.driver.leader()).then(|| {
                    let observed = leader.and_then(|l| observe_time_shift(&veh.history, &l.history, w, t).ok());
                    (veh.id, id, observed)
                })
            })
            .collect();
        for (id, leader, observed) in switches {
            if let Some(h) = self.vehicles.get_mut(&id).and_then(Vehicle::hdv_mut) {
                h.driver.follow(leader, observed, t);
            }
        }

        let mut next = Vec::with_capacity(self.vehicles.len());
        for veh in self.vehicles.values() {
            let planned = match &veh.kind {
                Kind::Cav(c) if veh.phase == Phase::Zone => c.plan.as_ref(),
                _ => None,
            };
            let (p1, v1, u, integrated) = if let Some(pl) = planned {
                if t1 <= pl.t_exit {
                    let k = pl.traj.eval(t1);
                    (k.p, k.v, k.u, false)
                } else {
                    let end = pl.traj.eval(pl.t_exit);
                    (end.p + end.v * (t1 - pl.t_exit), end.v, 0.0, false)
                }
            } else {
                let u = match &veh.kind {
                    // downstream of the exit traffic is free-flowing; never
                    // braking keeps the cruise forecast of exited vehicles safe
                    _ if veh.phase == Phase::Exited => {
                        let law = self.release_law(veh);
                        let hi = law.u_max.min((self.params.planner.v_max - veh.v) / dt);
                        (law.gain * (law.desired - veh.v)).clamp(0.0, hi.max(0.0))
                    }
                    Kind::Cav(c) => self.acc_accel(veh, c.desired_speed),
                    Kind::Hdv(h) => {
                        let tau = h.driver.effective_tau(t);
                        let cue = self.assigned_leader(veh.id).map(|l| LeaderCue {
                            p_ref: l.history.position_at(t - tau) - w * tau,
                            v_ref: l.history.speed_at(t - tau),
                            gap: l.p - veh.p,
                            leader_v: l.v,
                        });
                        let free = h.driver.params.free_speed;
                        hdv_driver_step(veh.p, veh.v, free, cue, &self.params.driver_gains, dt)
                    }
                };
                (veh.p + veh.v * dt + 0.5 * u * dt * dt, veh.v + u * dt, u, true)
            };
            next.push((veh.id, p1, v1, u, integrated));
        }

        let g = self.params.geometry;
        let cross = |p: f64, p1: f64, x: f64| (p < x && p1 >= x).then(|| t + dt * (x - p) / (p1 - p));
        let mut entries = Vec::new();
        for (id, p1, v1, u, integrated) in next {
            let veh = self.vehicles.get_mut(&id).expect("vehicle present");
            if let Some(te) = cross(veh.p, p1, g.p0) {
                veh.t_entry = Some(te);
                veh.phase = Phase::Zone;
                entries.push((te, id));
            }
            if let Some(tm) = cross(veh.p, p1, g.p_merge) {
                veh.t_merge = Some(tm);
            }
            if let Some(tx) = cross(veh.p, p1, g.p_exit) {
                veh.t_exit = Some(tx);
                veh.phase = Phase::Exited;
            }
            veh.p = p1;
            veh.v = v1;
            veh.u = u;
            veh.integrated = integrated;
            veh.history.push(Sample { t: t1, p: p1, v: v1 });
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        self.entered_now.clear();
        for (_, id) in entries {
            let idx = self.next_entry_index;
            self.next_entry_index += 1;
            let veh = self.vehicles.get_mut(&id).expect("vehicle present");
            veh.entry_index = Some(idx);
            self.entered_now.push(id);
        }
        self.retire_exited();
        self.clock = t1;
        self.steps += 1;

        replanner::step(self, t1);

        let failures = audit::audit(self, &order_before);
        let tail_end = g.p_exit + g.tail_len;
        self.vehicles.retain(|_, v| v.p < tail_end);
        if !failures.is_empty() {
            self.events.extend(failures.iter().cloned().map(Event::Audit));
            self.audit_failures.extend(failures.iter().cloned());
            if self.params.abort_on_audit {
                return Err(SimError::Audit { t: t1, failures, dump: self.dump() });
            }
        }
        Ok(())
    }

    fn retire_exited(&mut self) {
        for veh in self.vehicles.values_mut() {
            if veh.phase != Phase::Exited || veh.t_exit.is_none() {
                continue;
            }
            let exited_now = veh.t_exit.is_some_and(|tx| tx > self.clock);
            if !exited_now {
                continue;
            }
            if let (Some(t0), Some(tf)) = (veh.t_entry, veh.t_exit) {
                self.records.push(VehicleRecord {
                    id: veh.id,
                    role: veh.role(),
                    road: veh.road,
                    t_entry: t0,
                    t_merge: veh.t_merge,
                    t_exit: tf,
                });
            }
            match &mut veh.kind {
                Kind::Cav(c) => {
                    c.plan = None;
                }
                Kind::Hdv(h) => {
                    h.prediction = None;
                    h.model = None;
                }
            }
        }
    }

    /// Compact JSON of every vehicle, for post-mortems.
    pub fn dump(&self) -> String {
        let rows: Vec<_> = self
            .vehicles
            .values()
            .map(|v| {
                serde_json::json!({
                    "id": v.id, "role": v.role(), "road": v.road, "phase": v.phase,
                    "p": v.p, "v": v.v, "u": v.u, "entry_index": v.entry_index,
                    "plan": v.plan(),
                    "tau": v.hdv().and_then(|h| h.model.as_ref()).map(|m| m.tau),
                })
            })
            .collect();
        serde_json::json!({ "t": self.clock, "vehicles": rows }).to_string()
    }

    // ---- HDV models and predictions ----

    /// Trains (or retrains) the time-shift model of HDV `id` at `t`.
    ///
    /// Falls back to a virtual leader when the assigned leader cannot be
    /// bracketed over the training window, and to a wide prior when even
    /// that fails. Returns the previous and new distributions.
    pub fn train_hdv(&mut self, id: VehicleId, t: f64) -> Option<(Option<TimeShiftDist>, TimeShiftDist)> {
        let veh = self.vehicles.get(&id)?;
        let hdv = veh.hdv()?;
        let old = hdv.model.as_ref().map(|m| m.tau);
        let assigned = self.leaders.get(&id).map_or(LeaderRef::Virtual, |a| a.leader);
        let p = &self.params;
        let scale = p.geometry.feature_scale();
        let horizon = p.horizon.min(veh.history.len()).max(2);

        let vehicle_fit = match assigned {
            LeaderRef::Vehicle(j) => self
                .vehicles
                .get(&j)
                .map(|l| train_time_shift_model(&veh.history, &l.history, p.w, t, horizon, &scale)),
            LeaderRef::Virtual => None,
        };
        let model = match vehicle_fit {
            Some(Ok(m)) if m.tau.mu_tau <= p.free_flow_tau => HdvModel { tau: m.tau, assigned, virtual_traj: None },
            _ => {
                let (anchor_p, anchor_t) = match veh.t_entry {
                    Some(te) if (t - te).abs() <= p.dt => (p.geometry.p0, te),
                    _ => (veh.p, t),
                };
                let vl = virtual_leader(&veh.history, anchor_p, VIRTUAL_TAU_BAR, anchor_t, t, horizon);
                let tau = match train_time_shift_model(&veh.history, &vl, p.w, t, horizon, &scale) {
                    Ok(m) => m.tau,
                    Err(HumanModelError::HorizonTooShort { .. })
                    | Err(HumanModelError::InsufficientHistory { .. })
                    | Err(HumanModelError::Blr(_)) => {
                        TimeShiftDist { mu_tau: VIRTUAL_TAU_BAR, sigma2_tau: FALLBACK_TAU_VAR, stored_at: t }
                    }
                };
                HdvModel { tau, assigned, virtual_traj: Some(vl) }
            }
        };
        let new = model.tau;
        self.vehicles.get_mut(&id)?.hdv_mut()?.model = Some(model);
        Some((old, new))
    }

    /// Mean forward trajectory of any vehicle: its plan, its prediction, or
    /// a constant-speed extrapolation.
    pub fn mean_traj_of(&self, id: VehicleId) -> Option<Trajectory> {
        let veh = self.vehicles.get(&id)?;
        if veh.phase == Phase::Zone {
            match &veh.kind {
                Kind::Cav(CavState { plan: Some(pl), .. }) => return Some(Trajectory::Cubic(pl.traj)),
                Kind::Hdv(HdvState { prediction: Some(pr), .. }) => return Some(pr.mean_traj),
                _ => {}
            }
        }
        Some(Trajectory::Affine(self.cruise(veh)))
    }

    fn cruise(&self, veh: &Vehicle) -> AffineTraj {
        let v = veh.v.max(MIN_CRUISE_SPEED);
        let t = self.clock;
        AffineTraj { phi1: v, phi0: veh.p - v * t, t_start: t - 60.0, t_end: t + 600.0 }
    }

    /// Recomputes every in-zone HDV prediction from its stored time shift
    /// and its leader's current forecast, leaders first.
    pub fn refresh_predictions(&mut self) {
        let mut ids: Vec<_> = self
            .vehicles
            .values()
            .filter(|v| v.phase == Phase::Zone && v.hdv().is_some_and(|h| h.model.is_some()))
            .map(|v| (v.p, v.id))
            .collect();
        ids.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, id) in ids {
            let pred = self.predict_hdv(id);
            if let Some(h) = self.vehicles.get_mut(&id).and_then(Vehicle::hdv_mut) {
                h.prediction = pred;
            }
        }
    }

    fn predict_hdv(&self, id: VehicleId) -> Option<HdvPrediction> {
        let veh = self.vehicles.get(&id)?;
        let model = veh.hdv()?.model.as_ref()?;
        let w = self.params.w;
        let g = &self.params.geometry;
        let tau = model.tau;
        let (leader_traj, leader_ref) = match (model.virtual_traj, model.source_vehicle()) {
            (Some(vl), _) => (Trajectory::Affine(vl), None),
            (None, Some(j)) => match self.mean_traj_of(j) {
                Some(tr) => (tr, Some(j)),
                None => {
                    // leader has left the road: a synthetic leader reproducing the ego's own cruise
                    let c = self.cruise(veh);
                    let synthetic = AffineTraj { phi0: c.phi0 + (c.phi1 + w) * tau.mu_tau, ..c };
                    (Trajectory::Affine(synthetic), None)
                }
            },
            (None, None) => return None,
        };
        let mean_traj = mean_trajectory(&leader_traj, &tau, w);
        let merge_time = match veh.t_merge {
            Some(tm) => GaussianPred::new(tm, 0.0),
            None => predict_merge_time(&leader_traj, &tau, w, g.p_exit)
                .unwrap_or_else(|_| GaussianPred::new(crossing_time(&mean_traj, g.p_merge), tau.sigma2_tau)),
        };
        let exit_time_mean = crossing_time(&mean_traj, g.p_exit);
        Some(HdvPrediction { mean_traj, tau, leader_traj, leader_ref, w, merge_time, exit_time_mean })
    }

    // ---- planner plumbing ----

    /// Forecast of vehicle `id` as seen by a planner at the current clock.
    pub fn forecast(&self, id: VehicleId) -> Option<Forecast> {
        let veh = self.vehicles.get(&id)?;
        let g = &self.params.geometry;
        let t = self.clock;
        let recent = TrajHistory::from_samples(veh.history.window_ending(t, RECENT_SAMPLES), RECENT_SAMPLES);
        let (motion, merge, exit_time) = match &veh.kind {
            Kind::Cav(CavState { plan: Some(pl), .. }) if veh.phase == Phase::Zone => {
                let tm = veh.t_merge.unwrap_or(pl.t_merge);
                (Motion::Planned(Trajectory::Cubic(pl.traj)), GaussianPred::new(tm, 0.0), pl.t_exit)
            }
            Kind::Hdv(HdvState { prediction: Some(pr), .. }) if veh.phase == Phase::Zone => {
                (Motion::Hdv(Box::new(pr.clone())), pr.merge_time, pr.exit_time_mean)
            }
            _ => {
                let c = Trajectory::Affine(self.cruise(veh));
                let tm = veh.t_merge.unwrap_or_else(|| crossing_time(&c, g.p_merge));
                let tx = veh.t_exit.unwrap_or_else(|| crossing_time(&c, g.p_exit));
                let motion = if veh.phase == Phase::Exited {
                    Motion::Released { t, p: veh.p, v: veh.v }
                } else {
                    Motion::Cruise(self.cruise(veh))
                };
                (motion, GaussianPred::new(tm, 0.0), tx)
            }
        };
        let release = Some(self.release_law(veh));
        Some(Forecast { id, road: veh.road, motion, recent, now: t, merge, exit_time, release })
    }

    /// Motion law past the exit, shared by the dynamics and the forecasts.
    fn release_law(&self, veh: &Vehicle) -> FreeFlowLaw {
        let desired = match &veh.kind {
            Kind::Cav(c) => c.desired_speed,
            Kind::Hdv(h) => h.driver.params.free_speed,
        };
        FreeFlowLaw { desired, gain: self.params.acc.speed_gain, u_max: self.params.planner.u_max }
    }

    /// True when HDV `k`'s model-leader chain passes through `target`.
    pub fn follows(&self, k: VehicleId, target: VehicleId) -> bool {
        let mut cur = k;
        for _ in 0..self.vehicles.len() {
            let Some(j) = self
                .vehicles
                .get(&cur)
                .and_then(Vehicle::hdv)
                .and_then(|h| h.model.as_ref())
                .and_then(HdvModel::source_vehicle)
            else {
                return false;
            };
            if j == target {
                return true;
            }
            cur = j;
        }
        false
    }

    /// Constraint partners of CAV `id` at the current clock.
    pub fn snapshot_for(&self, id: VehicleId) -> NeighborSnapshot {
        let Some(ego) = self.vehicles.get(&id) else {
            return NeighborSnapshot::default();
        };
        let pm = self.params.geometry.p_merge;
        let ahead = |c: &&Vehicle| {
            c.id != id
                && c.phase != Phase::Buffer
                && c.p > ego.p
                && if ego.p >= pm { c.p >= pm } else { c.road == ego.road }
        };
        let predecessor = self
            .vehicles
            .values()
            .filter(ahead)
            .min_by(|a, b| a.p.total_cmp(&b.p).then(a.id.cmp(&b.id)))
            .and_then(|c| self.forecast(c.id));
        let neighbors = self
            .vehicles
            .values()
            .filter(|c| c.road != ego.road && c.phase == Phase::Zone)
            .filter(|c| c.role() == Role::Cav || !self.follows(c.id, id))
            .filter_map(|c| self.forecast(c.id))
            .collect();
        NeighborSnapshot { predecessor, neighbors }
    }

    fn ego_state(&self, id: VehicleId) -> Option<EgoState> {
        let v = self.vehicles.get(&id)?;
        Some(EgoState { t: self.clock, p: v.p, v: v.v, merged_at: v.t_merge })
    }

    /// Plans CAV `id` from its current state and commits on success.
    pub fn plan_cav(&mut self, id: VehicleId, reason: PlanReason) -> Result<PlannedTrajectory, PlanError> {
        let ego = self.ego_state(id).ok_or(PlanError::NotInZone { p: f64::NAN, p_exit: f64::NAN })?;
        let snap = self.snapshot_for(id);
        let g = self.params.geometry;
        let res = plan(&ego, &snap, &self.params.planner, self.params.mode, g.p_merge, g.p_exit);
        let t = self.clock;
        let retry = self.params.retry_interval;
        match &res {
            Ok(pl) => {
                if let Some(c) = self.vehicles.get_mut(&id).and_then(Vehicle::cav_mut) {
                    c.plan = Some(*pl);
                    c.retry_at = None;
                }
                self.events.push(Event::PlanCommit {
                    t,
                    id,
                    reason,
                    t_merge: pl.t_merge,
                    t_exit: pl.t_exit,
                    extended: pl.extended,
                });
            }
            Err(e) => {
                if let Some(c) = self.vehicles.get_mut(&id).and_then(Vehicle::cav_mut) {
                    if c.plan.is_none() {
                        c.retry_at = Some(t + retry);
                    }
                }
                self.events.push(Event::PlanInfeasible { t, id, reason, error: e.to_string() });
            }
        }
        res
    }

    /// True when one of CAV `id`'s constraint partners has neither a plan nor
    /// a prediction.
    pub fn has_unplanned_partner(&self, id: VehicleId) -> bool {
        let snap = self.snapshot_for(id);
        snap.predecessor.iter().chain(&snap.neighbors).any(|f| matches!(f.motion, Motion::Cruise(_)))
    }

    /// Re-checks CAV `id`'s committed plan against the current forecasts.
    pub fn certify_plan(&self, id: VehicleId) -> Option<Verdict> {
        let pl = self.vehicles.get(&id)?.plan()?;
        let ego = self.ego_state(id)?;
        let snap = self.snapshot_for(id);
        let g = &self.params.geometry;
        Some(certify(&pl.traj, &ego, &snap, &self.params.planner, self.params.mode, g.p_merge))
    }

    /// Discards a plan that can no longer be certified; the CAV keeps gaps
    /// with cruise control and retries on the next step.
    pub fn drop_plan(&mut self, id: VehicleId) {
        let t = self.clock;
        if let Some(c) = self.vehicles.get_mut(&id).and_then(Vehicle::cav_mut) {
            c.plan = None;
            c.retry_at = Some(t);
        }
    }

    pub fn hdv_model(&self, id: VehicleId) -> Option<&HdvModel> {
        self.vehicles.get(&id)?.hdv()?.model.as_ref()
    }

    pub fn push_event(&mut self, e: Event) {
        self.events.push(e);
    }
}

/// Time `traj` reaches `p`, extrapolating at the end speed past its window.
pub fn crossing_time(traj: &Trajectory, p: f64) -> f64 {
    let (a, b) = traj.window();
    let (pa, pb) = (traj.position(a), traj.position(b));
    if p > pb {
        return b + (p - pb) / traj.eval(b).v.max(MIN_CRUISE_SPEED);
    }
    if p < pa {
        return a - (pa - p) / traj.eval(a).v.max(MIN_CRUISE_SPEED);
    }
    time_at_position(traj, p).unwrap_or_else(|_| a + (p - pa) / traj.eval(a).v.max(MIN_CRUISE_SPEED))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_params() -> SimParams {
        SimParams { tau_noise_std: 0.0, ..SimParams::default() }
    }

    fn scripted(list: &[(f64, Road, Role, f64, f64)]) -> Vec<ScriptedArrival> {
        list.iter()
            .map(|&(time, road, role, speed, desired_tau)| ScriptedArrival { time, road, role, speed, desired_tau })
            .collect()
    }

    fn run_until(w: &mut WorldState, t_end: f64) {
        while w.clock < t_end - 1e-9 {
            w.step().expect("no audit failure");
        }
    }

    #[test]
    fn single_cav_tracks_plan_and_exits_on_time() {
        let arrivals = scripted(&[(0.0, Road::A, Role::Cav, 20.0, 1.5)]);
        let mut w = WorldState::new(quiet_params(), 1, vec![], arrivals, BTreeMap::new());
        run_until(&mut w, 60.0);
        let rec = &w.records[0];
        let commit = w
            .events
            .iter()
            .find_map(|e| match e {
                Event::PlanCommit { t_exit, .. } => Some(*t_exit),
                _ => None,
            })
            .unwrap();
        assert!((rec.t_exit - commit).abs() <= 0.1 + 1e-9);
    }

    #[test]
    fn entry_indices_follow_entry_order() {
        let arrivals = scripted(&[
            (0.0, Road::A, Role::Hdv, 12.0, 1.5),
            (1.0, Road::B, Role::Cav, 25.0, 1.5),
            (2.0, Road::A, Role::Cav, 20.0, 1.5),
        ]);
        let mut w = WorldState::new(quiet_params(), 1, vec![], arrivals, BTreeMap::new());
        run_until(&mut w, 20.0);
        let mut seen: Vec<_> = w.vehicles.values().filter_map(|v| Some((v.t_entry?, v.entry_index?))).collect();
        seen.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(seen.windows(2).all(|p| p[0].1 < p[1].1));
    }

    #[test]
    fn integrated_steps_do_not_teleport() {
        let arrivals = scripted(&[(0.0, Road::A, Role::Hdv, 18.0, 1.4), (2.0, Road::A, Role::Hdv, 20.0, 1.8)]);
        let mut w = WorldState::new(SimParams::default(), 4, vec![], arrivals, BTreeMap::new());
        let mut last: BTreeMap<VehicleId, (f64, f64)> = BTreeMap::new();
        for _ in 0..300 {
            w.step().unwrap();
            for v in w.vehicles.values() {
                if let Some(&(p, s)) = last.get(&v.id) {
                    if v.integrated {
                        let expect = p + s * 0.1 + 0.5 * v.u * 0.01;
                        assert!((v.p - expect).abs() < 1e-9);
                    }
                }
                last.insert(v.id, (v.p, v.v));
            }
        }
    }

    #[test]
    fn crossing_time_extrapolates() {
        let tr = Trajectory::Affine(AffineTraj { phi1: 10.0, phi0: 0.0, t_start: 0.0, t_end: 5.0 });
        assert!((crossing_time(&tr, 30.0) - 3.0).abs() < 1e-12);
        assert!((crossing_time(&tr, 80.0) - 8.0).abs() < 1e-12);
    }
}
