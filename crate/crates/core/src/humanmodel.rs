//! Data-driven Newell car following.
//!
//! An HDV `k` behind leader `j` is modeled as `p_k(t) = p_j(t - tau) - w tau`.
//! The time shift `tau` is observed from recorded trajectories, regressed on
//! `[1, p_k, p_j]` with Bayesian linear regression, and summarized as a
//! Gaussian used downstream for prediction.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blr::{self, BlrError, BlrPosterior, Dataset};
use crate::polytraj::{AffineTraj, CubicTraj, Trajectory};
use crate::sim::{Road, VehicleId};

/// Upper end of the time-shift search bracket.
pub const TAU_MAX: f64 = 10.0;
/// Lower clamp on predicted mean time shifts.
pub const MIN_TAU: f64 = 0.1;
/// Time shift of the virtual leader assigned to unled HDVs.
pub const VIRTUAL_TAU_BAR: f64 = 1.5;

const EB_MAX_ITER: usize = 200;
const EB_TOL: f64 = 1e-8;
const RESIDUAL_TOL: f64 = 1e-6;
const MIN_VIRTUAL_SPEED: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HumanModelError {
    #[error("no time shift in [0, {TAU_MAX}] s solves the Newell relation at t = {t}")]
    HorizonTooShort { t: f64 },
    #[error("need {need} history samples, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error(transparent)]
    Blr(#[from] BlrError),
}

/// Anything that can report a position at an arbitrary time.
pub trait PositionSource {
    fn position_at(&self, t: f64) -> f64;
}

impl PositionSource for CubicTraj {
    fn position_at(&self, t: f64) -> f64 {
        self.position(t)
    }
}

impl PositionSource for AffineTraj {
    fn position_at(&self, t: f64) -> f64 {
        self.position(t)
    }
}

impl PositionSource for Trajectory {
    fn position_at(&self, t: f64) -> f64 {
        self.position(t)
    }
}

impl<F: Fn(f64) -> f64> PositionSource for F {
    fn position_at(&self, t: f64) -> f64 {
        self(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub p: f64,
    pub v: f64,
}

/// Bounded record of uniformly sampled `(t, p, v)`.
///
/// Lookups between samples interpolate linearly; lookups before the first
/// sample extrapolate backward at the earliest recorded speed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajHistory {
    samples: VecDeque<Sample>,
    capacity: usize,
}

impl TrajHistory {
    pub fn new(capacity: usize) -> Self {
        Self { samples: VecDeque::with_capacity(capacity), capacity: capacity.max(2) }
    }

    /// Builds a history from samples; panics if times are not increasing.
    pub fn from_samples(samples: impl IntoIterator<Item = Sample>, capacity: usize) -> Self {
        let mut h = Self::new(capacity);
        for s in samples {
            h.push(s);
        }
        h
    }

    pub fn push(&mut self, s: Sample) {
        if let Some(last) = self.samples.back() {
            assert!(s.t > last.t, "history timestamps must increase ({} after {})", s.t, last.t);
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first(&self) -> Option<&Sample> {
        self.samples.front()
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.back()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Sample> + ExactSizeIterator {
        self.samples.iter()
    }

    /// The most recent `n` samples at or before `t`, oldest first.
    pub fn window_ending(&self, t: f64, n: usize) -> Vec<Sample> {
        let end = self.samples.partition_point(|s| s.t <= t + 1e-9);
        let start = end.saturating_sub(n);
        self.samples.range(start..end).copied().collect()
    }

    /// Speed at `t` by linear interpolation, held constant outside the record.
    pub fn speed_at(&self, t: f64) -> f64 {
        let (Some(first), Some(last)) = (self.samples.front(), self.samples.back()) else {
            return f64::NAN;
        };
        if t <= first.t {
            return first.v;
        }
        if t >= last.t {
            return last.v;
        }
        let idx = self.samples.partition_point(|s| s.t <= t);
        let (a, b) = (self.samples[idx - 1], self.samples[idx]);
        a.v + (b.v - a.v) * (t - a.t) / (b.t - a.t)
    }

    pub fn mean_speed(&self, t: f64, n: usize) -> Option<f64> {
        let w = self.window_ending(t, n);
        (!w.is_empty()).then(|| w.iter().map(|s| s.v).sum::<f64>() / w.len() as f64)
    }
}

impl PositionSource for TrajHistory {
    fn position_at(&self, t: f64) -> f64 {
        let (Some(first), Some(last)) = (self.samples.front(), self.samples.back()) else {
            return f64::NAN;
        };
        if t <= first.t {
            return first.p + first.v * (t - first.t);
        }
        if t >= last.t {
            return last.p + last.v * (t - last.t);
        }
        let idx = self.samples.partition_point(|s| s.t <= t);
        let (a, b) = (self.samples[idx - 1], self.samples[idx]);
        a.p + (b.p - a.p) * (t - a.t) / (b.t - a.t)
    }
}

/// Gaussian belief about one HDV's time shift, stamped with when it was stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeShiftDist {
    pub mu_tau: f64,
    pub sigma2_tau: f64,
    pub stored_at: f64,
}

impl TimeShiftDist {
    pub fn as_pred(&self) -> blr::GaussianPred {
        blr::GaussianPred::new(self.mu_tau, self.sigma2_tau)
    }
}

/// Affine map of positions onto `[0, 1]` across the control zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub p_start: f64,
    pub p_end: f64,
}

impl FeatureScale {
    pub fn scale(&self, p: f64) -> f64 {
        (p - self.p_start) / (self.p_end - self.p_start)
    }
}

pub fn make_feature(p_k: f64, p_j: f64, scale: &FeatureScale) -> [f64; 3] {
    [1.0, scale.scale(p_k), scale.scale(p_j)]
}

/// Solves `p_j(t - tau) - w tau = p_k(t)` for `tau` by bisection.
///
/// The left side is strictly decreasing in `tau` whenever the leader moves
/// forward and `w > 0`, so a sign change on `[0, TAU_MAX]` brackets the
/// unique root.
pub fn observe_time_shift(
    ego: &impl PositionSource,
    leader: &impl PositionSource,
    w: f64,
    t: f64,
) -> Result<f64, HumanModelError> {
    let p_k = ego.position_at(t);
    let resid = |tau: f64| leader.position_at(t - tau) - w * tau - p_k;
    let (mut lo, mut hi) = (0.0, TAU_MAX);
    let (f_lo, f_hi) = (resid(lo), resid(hi));
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(HumanModelError::HorizonTooShort { t });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = resid(mid);
        if f.abs() < RESIDUAL_TOL {
            return Ok(mid);
        }
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub posterior: BlrPosterior,
    pub tau: TimeShiftDist,
    pub dataset_len: usize,
}

/// Fits the time-shift regression on the last `horizon` ego samples up to `t`
/// and returns the predictive distribution at the current feature.
pub fn train_time_shift_model(
    ego: &TrajHistory,
    leader: &impl PositionSource,
    w: f64,
    t: f64,
    horizon: usize,
    scale: &FeatureScale,
) -> Result<TrainedModel, HumanModelError> {
    let window = ego.window_ending(t, horizon);
    if horizon == 0 || window.len() < horizon.max(2) {
        return Err(HumanModelError::InsufficientHistory { need: horizon.max(2), have: window.len() });
    }
    let mut xs = Vec::with_capacity(window.len());
    let mut ys = Vec::with_capacity(window.len());
    for s in &window {
        let tau = observe_time_shift(ego, leader, w, s.t)?;
        xs.push(make_feature(s.p, leader.position_at(s.t), scale).to_vec());
        ys.push(tau);
    }
    let data = Dataset::new(xs, ys)?;
    let (alpha, beta) = blr::empirical_bayes(&data, EB_MAX_ITER, EB_TOL)?;
    let posterior = blr::fit(&data, alpha, beta)?;
    let p_now = ego.position_at(t);
    let pred = blr::predict(&posterior, &make_feature(p_now, leader.position_at(t), scale))?;
    Ok(TrainedModel {
        posterior,
        tau: TimeShiftDist { mu_tau: pred.mu.max(MIN_TAU), sigma2_tau: pred.sigma2, stored_at: t },
        dataset_len: data.len(),
    })
}

/// Constant-speed stand-in leader for an HDV with nobody ahead.
///
/// Its speed is the ego's mean speed over the horizon and it passes `p0`
/// exactly `tau_bar` before the ego's control-zone entry `t_entry`.
pub fn virtual_leader(ego: &TrajHistory, p0: f64, tau_bar: f64, t_entry: f64, t: f64, horizon: usize) -> AffineTraj {
    let speed = ego
        .mean_speed(t, horizon.max(1))
        .unwrap_or(MIN_VIRTUAL_SPEED)
        .max(MIN_VIRTUAL_SPEED);
    let anchor = t_entry - tau_bar;
    AffineTraj { phi1: speed, phi0: p0 - speed * anchor, t_start: anchor - 60.0, t_end: t + 600.0 }
}

/// Minimal per-vehicle view for leader assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleView {
    pub id: VehicleId,
    pub road: Road,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeaderRef {
    Vehicle(VehicleId),
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeaderAssignment {
    pub follower: VehicleId,
    pub leader: LeaderRef,
    pub projected: bool,
}

/// Nearest vehicle ahead for every vehicle in `views`.
///
/// Candidates are vehicles on the follower's own road, vehicles already past
/// the merge (one shared ordering there), and, when both are inside the
/// projection zone `[p_merge - proj_len, p_merge]`, vehicles on the other road
/// mapped by equal distance to the merge.
pub fn assign_leaders(views: &[VehicleView], p_merge: f64, proj_len: f64) -> BTreeMap<VehicleId, LeaderAssignment> {
    let in_proj = |p: f64| p >= p_merge - proj_len && p < p_merge;
    let mut out = BTreeMap::new();
    for f in views {
        let mut best: Option<&VehicleView> = None;
        for c in views {
            if c.id == f.id || c.p <= f.p {
                continue;
            }
            let visible = c.road == f.road || c.p >= p_merge || (in_proj(f.p) && in_proj(c.p));
            if visible && best.is_none_or(|b| c.p < b.p || (c.p == b.p && c.id < b.id)) {
                best = Some(c);
            }
        }
        let (leader, projected) = match best {
            Some(b) => (LeaderRef::Vehicle(b.id), b.road != f.road && b.p < p_merge),
            None => (LeaderRef::Virtual, false),
        };
        out.insert(f.id, LeaderAssignment { follower: f.id, leader, projected });
    }
    out
}
