//! Exit-time line search for one CAV.
//!
//! Candidate exit times are swept upward from the earliest feasible arrival.
//! Each candidate fixes a cubic through the current state; the first one
//! that passes the kinematic, lateral and rear-end checks is returned.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blr::GaussianPred;
use crate::humanmodel::{PositionSource, TrajHistory};
use crate::polytraj::{
    feasible_time_range, solve_boundary_coefficients, time_at_position, AffineTraj, CubicTraj, FreeFlowLaw, Limits,
    PolyError, Trajectory,
};
use crate::sim::{Road, VehicleId};
use crate::uncertainty::{tightening_factor, HdvPrediction};

const CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerParams {
    /// Lateral time gap at the merge point, s.
    pub delta_l: f64,
    /// Rear-end time shift, s.
    pub delta_r: f64,
    pub d_min: f64,
    /// Target probability of constraint satisfaction.
    pub xi: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub dt_check: f64,
    pub dt_step: f64,
    /// How far past the latest bang-cruise arrival the sweep may go.
    pub t_extend_max: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            delta_l: 2.5,
            delta_r: 1.5,
            d_min: 10.0,
            xi: 0.95,
            u_min: -4.0,
            u_max: 3.0,
            v_min: 3.0,
            v_max: 30.0,
            dt_check: 0.1,
            dt_step: 0.1,
            t_extend_max: 20.0,
        }
    }
}

impl PlannerParams {
    pub fn limits(&self) -> Limits {
        Limits { u_min: self.u_min, u_max: self.u_max, v_min: self.v_min, v_max: self.v_max }
    }

    /// Tightening multiplier for `mode`; zero when deterministic.
    pub fn z(&self, mode: PlanMode) -> f64 {
        match mode {
            PlanMode::Deterministic => 0.0,
            PlanMode::Stochastic => tightening_factor(self.xi),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("delta_l", self.delta_l),
            ("delta_r", self.delta_r),
            ("d_min", self.d_min),
            ("u_max", self.u_max),
            ("v_min", self.v_min),
            ("dt_check", self.dt_check),
            ("dt_step", self.dt_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.u_min < 0.0) {
            return Err(format!("u_min must be negative, got {}", self.u_min));
        }
        if !(self.v_max > self.v_min) {
            return Err(format!("v_max ({}) must exceed v_min ({})", self.v_max, self.v_min));
        }
        if !(self.xi > 0.0 && self.xi < 1.0) {
            return Err(format!("xi must lie in (0, 1), got {}", self.xi));
        }
        if !(self.t_extend_max >= 0.0) {
            return Err(format!("t_extend_max must be non-negative, got {}", self.t_extend_max));
        }
        Ok(())
    }
}

/// Where the planning CAV is now.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    pub t: f64,
    pub p: f64,
    pub v: f64,
    /// Actual merge time if the merge point is already behind.
    pub merged_at: Option<f64>,
}

/// Forecast of another vehicle's motion.
#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    /// Committed CAV plan; deterministic.
    Planned(Trajectory),
    /// Learned HDV prediction; Gaussian position.
    Hdv(Box<HdvPrediction>),
    /// Constant-speed extrapolation for vehicles with neither.
    Cruise(AffineTraj),
    /// Past the exit, from the state at `t`; follows the forecast's release law.
    Released { t: f64, p: f64, v: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub id: VehicleId,
    pub road: Road,
    pub motion: Motion,
    /// Observed samples up to `now`; used in place of the forecast for past times.
    pub recent: TrajHistory,
    pub now: f64,
    pub merge: GaussianPred,
    pub exit_time: f64,
    /// How the vehicle moves once it is past the exit; without one it is
    /// taken to hold its exit speed.
    pub release: Option<FreeFlowLaw>,
}

impl Forecast {
    /// Mean and variance of the position at time `s`.
    pub fn mean_var(&self, s: f64) -> (f64, f64) {
        if s <= self.now && !self.recent.is_empty() {
            return (self.recent.position_at(s), 0.0);
        }
        match &self.motion {
            Motion::Planned(tr) => match self.release {
                Some(law) if s > tr.window().1 => {
                    let end = tr.window().1;
                    let k = tr.eval(end);
                    (law.position(k.p, k.v, s - end), 0.0)
                }
                _ => (tr.position_or_cruise(s), 0.0),
            },
            Motion::Hdv(pred) => pred.position_moments(s),
            Motion::Cruise(a) => (a.position(s), 0.0),
            Motion::Released { t, p, v } => match self.release {
                Some(law) => (law.position(*p, *v, s - t), 0.0),
                None => (p + v * (s - t), 0.0),
            },
        }
    }

    pub fn is_hdv(&self) -> bool {
        matches!(self.motion, Motion::Hdv(_))
    }
}

/// What the planning CAV must stay clear of.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSnapshot {
    /// Nearest vehicle ahead on the ego's own path.
    pub predecessor: Option<Forecast>,
    /// Control-zone vehicles from the other road.
    pub neighbors: Vec<Forecast>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedTrajectory {
    pub traj: CubicTraj,
    pub t_exit: f64,
    pub t_merge: f64,
    pub planned_at: f64,
    pub mode: PlanMode,
    /// Exit time lies beyond the latest bang-cruise arrival.
    pub extended: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("no exit time in [{t_lower:.2}, {t_last:.2}] s satisfies the constraints")]
    Infeasible { t_lower: f64, t_last: f64 },
    #[error("ego at p = {p} is not upstream of the exit {p_exit}")]
    NotInZone { p: f64, p_exit: f64 },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Exact speed and acceleration bounds on `[a, b]`.
///
/// Acceleration is affine so its extremes are at the ends; speed is a
/// parabola so the vertex is checked too when it falls inside.
pub fn check_kinematic(traj: &CubicTraj, params: &PlannerParams, window: (f64, f64)) -> bool {
    let (a, b) = window;
    let u_ok = |t: f64| {
        let u = traj.accel(t);
        u >= params.u_min - CHECK_TOL && u <= params.u_max + CHECK_TOL
    };
    let v_ok = |t: f64| {
        let v = traj.speed(t);
        v >= params.v_min - CHECK_TOL && v <= params.v_max + CHECK_TOL
    };
    if !(u_ok(a) && u_ok(b) && v_ok(a) && v_ok(b)) {
        return false;
    }
    if traj.phi3 != 0.0 {
        let vertex = traj.t_ref - traj.phi2 / (3.0 * traj.phi3);
        if vertex > a && vertex < b && !v_ok(vertex) {
            return false;
        }
    }
    true
}

pub fn check_lateral_det(t_i_m: f64, t_k_m: f64, delta_l: f64) -> bool {
    (t_i_m - t_k_m).abs() >= delta_l - CHECK_TOL
}

pub fn check_lateral_prob(t_i_m: f64, merge: &GaussianPred, delta_l: f64, z: f64) -> bool {
    let margin = delta_l + z * merge.sigma();
    let d = t_i_m - merge.mu;
    d >= margin - CHECK_TOL || d <= -margin + CHECK_TOL
}

/// `p_i(t) <= mean_k(t - delta_r) - d_min - z sd_k(t - delta_r)` on the
/// `dt_check` grid over `window`, endpoints included.
pub fn check_rear_end(
    traj: &CubicTraj,
    leader: &Forecast,
    params: &PlannerParams,
    window: (f64, f64),
    z: f64,
) -> bool {
    let (a, b) = window;
    if b < a {
        return true;
    }
    let gap_ok = |t: f64| {
        let (mu, var) = leader.mean_var(t - params.delta_r);
        traj.position(t) - mu <= -params.d_min - z * var.sqrt() + CHECK_TOL
    };
    let n = ((b - a) / params.dt_check).floor() as usize;
    (0..=n).all(|i| gap_ok(a + i as f64 * params.dt_check)) && gap_ok(b)
}

/// Merge time of `traj`, or the recorded one once the ego is past the merge.
fn merge_time_of(traj: &CubicTraj, ego: &EgoState, p_merge: f64) -> Result<f64, PolyError> {
    match ego.merged_at {
        Some(t) => Ok(t),
        None => time_at_position(&Trajectory::Cubic(*traj), p_merge),
    }
}

/// Outcome of checking one candidate exit time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Kinematic,
    Lateral(VehicleId),
    RearEnd(VehicleId),
    PriorMerger(VehicleId),
}

/// Runs every constraint on one candidate; stops at the first failure.
pub fn certify(
    traj: &CubicTraj,
    ego: &EgoState,
    neighbors: &NeighborSnapshot,
    params: &PlannerParams,
    mode: PlanMode,
    p_merge: f64,
) -> Verdict {
    let t_exit = traj.t_end;
    if !check_kinematic(traj, params, (traj.t_start, t_exit)) {
        return Verdict::Kinematic;
    }
    let z = params.z(mode);
    let Ok(t_merge) = merge_time_of(traj, ego, p_merge) else {
        return Verdict::Kinematic;
    };
    let merging = ego.merged_at.is_none();
    if merging {
        for k in &neighbors.neighbors {
            let ok = match (mode, k.is_hdv()) {
                (PlanMode::Stochastic, true) => check_lateral_prob(t_merge, &k.merge, params.delta_l, z),
                _ => check_lateral_det(t_merge, k.merge.mu, params.delta_l),
            };
            if !ok {
                return Verdict::Lateral(k.id);
            }
        }
    }
    if let Some(k) = &neighbors.predecessor {
        let zk = if k.is_hdv() { z } else { 0.0 };
        if !check_rear_end(traj, k, params, (ego.t, t_exit), zk) {
            return Verdict::RearEnd(k.id);
        }
    }
    if merging {
        let prior = neighbors
            .neighbors
            .iter()
            .filter(|k| k.merge.mu < t_merge)
            .max_by(|a, b| a.merge.mu.total_cmp(&b.merge.mu));
        if let Some(k) = prior {
            let zk = if k.is_hdv() { z } else { 0.0 };
            if !check_rear_end(traj, k, params, (t_merge, t_exit), zk) {
                return Verdict::PriorMerger(k.id);
            }
        }
    }
    Verdict::Pass
}

/// Earliest exit time on the `dt_step` grid that passes [`certify`].
pub fn plan(
    ego: &EgoState,
    neighbors: &NeighborSnapshot,
    params: &PlannerParams,
    mode: PlanMode,
    p_merge: f64,
    p_exit: f64,
) -> Result<PlannedTrajectory, PlanError> {
    if !(ego.p < p_exit) {
        return Err(PlanError::NotInZone { p: ego.p, p_exit });
    }
    let window = feasible_time_range(ego.p, ego.v, p_exit, ego.t, &params.limits());
    let t_last = window.t_upper + params.t_extend_max;
    let mut n = 0usize;
    loop {
        let t_f = window.t_lower + n as f64 * params.dt_step;
        if t_f > t_last + CHECK_TOL {
            return Err(PlanError::Infeasible { t_lower: window.t_lower, t_last });
        }
        n += 1;
        let traj = solve_boundary_coefficients(ego.t, ego.v, t_f, ego.p, p_exit)?;
        if certify(&traj, ego, neighbors, params, mode, p_merge) == Verdict::Pass {
            let t_merge = merge_time_of(&traj, ego, p_merge)?;
            return Ok(PlannedTrajectory {
                traj,
                t_exit: t_f,
                t_merge,
                planned_at: ego.t,
                mode,
                extended: t_f > window.t_upper + CHECK_TOL,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::humanmodel::TimeShiftDist;
    use crate::uncertainty::{mean_trajectory, predict_merge_time};

    fn params() -> PlannerParams {
        PlannerParams::default()
    }

    fn cruise_forecast(id: u64, road: Road, p_at_zero: f64, v: f64) -> Forecast {
        let a = AffineTraj::new(v, p_at_zero, -100.0, 100.0).unwrap();
        Forecast {
            id: VehicleId(id),
            road,
            motion: Motion::Planned(a.into()),
            recent: TrajHistory::new(4),
            now: 0.0,
            merge: GaussianPred::new(a.time_at(0.0), 0.0),
            exit_time: a.time_at(80.0),
            release: None,
        }
    }

    #[test]
    fn kinematic_examples() {
        let cruise = CubicTraj::new(0.0, 0.0, 10.0, 0.0, 0.0, 10.0);
        assert!(check_kinematic(&cruise, &params(), (0.0, 10.0)));
        // D = 100 in T = 4 from v0 = 0 needs u(t0) = 3 D / T^2 = 18.75
        let hard = solve_boundary_coefficients(0.0, 5.0, 4.0, 0.0, 100.0).unwrap();
        assert!(hard.accel(0.0) > 3.0);
        assert!(!check_kinematic(&hard, &params(), (0.0, 4.0)));
    }

    #[test]
    fn lateral_examples() {
        assert!(check_lateral_det(10.0, 12.5, 2.5));
        assert!(!check_lateral_det(10.0, 12.4, 2.5));
        assert!(check_lateral_det(12.6, 10.0, 2.5));
        let z = tightening_factor(0.95);
        let merge = GaussianPred::new(10.0, 0.25);
        assert!(check_lateral_prob(10.0 + 2.5 + z * 0.5, &merge, 2.5, z));
        assert!(!check_lateral_prob(10.0 + 2.5 + z * 0.5 - 1e-3, &merge, 2.5, z));
        assert!(!check_lateral_prob(10.0, &merge, 2.5, z));
        let sharp = GaussianPred::new(10.0, 0.0);
        for t in [7.4, 7.5, 9.0, 12.5, 12.6] {
            assert_eq!(check_lateral_prob(t, &sharp, 2.5, z), check_lateral_det(t, 10.0, 2.5));
        }
    }

    #[test]
    fn rear_end_headway_boundary() {
        let ego = CubicTraj::new(0.0, 0.0, 20.0, 0.0, 0.0, 10.0);
        let lead = cruise_forecast(1, Road::A, 40.0, 20.0);
        assert!(check_rear_end(&ego, &lead, &params(), (0.0, 10.0), 0.0));
        let close = cruise_forecast(1, Road::A, 39.9, 20.0);
        assert!(!check_rear_end(&ego, &close, &params(), (0.0, 10.0), 0.0));
    }

    #[test]
    fn rear_end_flips_under_tightening() {
        let leader = AffineTraj::new(20.0, 100.0, -50.0, 100.0).unwrap();
        let tau = TimeShiftDist { mu_tau: 1.5, sigma2_tau: 0.04, stored_at: 0.0 };
        let w = 3.0;
        let pred = HdvPrediction {
            mean_traj: mean_trajectory(&leader.into(), &tau, w),
            tau,
            leader_traj: leader.into(),
            leader_ref: None,
            w,
            merge_time: predict_merge_time(&leader.into(), &tau, w, 80.0).unwrap(),
            exit_time_mean: 10.0,
        };
        let hdv = Forecast {
            id: VehicleId(1),
            road: Road::A,
            motion: Motion::Hdv(Box::new(pred.clone())),
            recent: TrajHistory::new(4),
            now: 0.0,
            merge: pred.merge_time,
            exit_time: 10.0,
            release: None,
        };
        // sd of the HDV position is (20 + 3) * 0.2 = 4.6 m; put the ego 2 m inside it
        let (mu, _) = hdv.mean_var(-1.5);
        let ego = CubicTraj::new(0.0, 0.0, 20.0, mu - 10.0 - 2.0, 0.0, 5.0);
        assert!(check_rear_end(&ego, &hdv, &params(), (0.0, 5.0), 0.0));
        assert!(!check_rear_end(&ego, &hdv, &params(), (0.0, 5.0), 1.645));
    }

    #[test]
    fn empty_scene_at_top_speed_cruises() {
        let ego = EgoState { t: 0.0, p: -350.0, v: 30.0, merged_at: None };
        let p = plan(&ego, &NeighborSnapshot::default(), &params(), PlanMode::Stochastic, 0.0, 80.0).unwrap();
        assert!((p.t_exit - 430.0 / 30.0).abs() < 1e-9);
        assert!(p.traj.phi3.abs() < 1e-12 && p.traj.phi2.abs() < 1e-12);
        assert!((p.t_merge - 350.0 / 30.0).abs() < 1e-6);
    }

    #[test]
    fn plan_is_minimal_on_grid() {
        let ego = EgoState { t: 0.0, p: -350.0, v: 20.0, merged_at: None };
        let snap = NeighborSnapshot { predecessor: Some(cruise_forecast(1, Road::A, -260.0, 15.0)), neighbors: vec![] };
        let pl = plan(&ego, &snap, &params(), PlanMode::Deterministic, 0.0, 80.0).unwrap();
        let w = feasible_time_range(-350.0, 20.0, 80.0, 0.0, &params().limits());
        let mut t = w.t_lower;
        while t < pl.t_exit - 1e-6 {
            let c = solve_boundary_coefficients(0.0, 20.0, t, -350.0, 80.0).unwrap();
            assert_ne!(certify(&c, &ego, &snap, &params(), PlanMode::Deterministic, 0.0), Verdict::Pass);
            t += 0.1;
        }
        assert_eq!(certify(&pl.traj, &ego, &snap, &params(), PlanMode::Deterministic, 0.0), Verdict::Pass);
        assert!(pl.t_exit > w.t_lower + 1.0);
    }

    #[test]
    fn infeasible_when_leader_is_too_close() {
        let ego = EgoState { t: 0.0, p: -350.0, v: 20.0, merged_at: None };
        let snap = NeighborSnapshot { predecessor: Some(cruise_forecast(1, Road::A, -345.0, 3.0)), neighbors: vec![] };
        assert!(matches!(
            plan(&ego, &snap, &params(), PlanMode::Deterministic, 0.0, 80.0),
            Err(PlanError::Infeasible { .. })
        ));
    }

    #[test]
    fn params_validation() {
        assert!(params().validate().is_ok());
        assert!(PlannerParams { xi: 1.0, ..params() }.validate().is_err());
        assert!(PlannerParams { v_min: 40.0, ..params() }.validate().is_err());
        assert!(PlannerParams { dt_step: 0.0, ..params() }.validate().is_err());
    }
}
