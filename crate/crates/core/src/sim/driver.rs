//! Stand-in human driver: tracks its own Newell target with a
//! velocity-form proportional law.
//!
//! After a leader change the driver starts from the time shift it actually
//! has to the new leader and relaxes toward its desired one, so a vehicle
//! cutting in ahead does not cause a step in the target.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::VehicleId;

/// Linear ramp of the driver's time shift by `delta_tau` over `[start, end]`,
/// held afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSegment {
    pub start: f64,
    pub end: f64,
    pub delta_tau: f64,
}

impl DriftSegment {
    pub fn offset(&self, t: f64) -> f64 {
        if t <= self.start {
            0.0
        } else if t >= self.end || self.end <= self.start {
            self.delta_tau
        } else {
            self.delta_tau * (t - self.start) / (self.end - self.start)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriverGains {
    /// Position error to speed correction, 1/s.
    pub position: f64,
    /// Speed error to acceleration, 1/s.
    pub speed: f64,
    /// Largest speed correction from position error, m/s.
    pub max_correction: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    /// How fast the time shift to a new leader approaches the desired one, s/s.
    pub relax_rate: f64,
    /// Braking the driver counts on when judging a safe speed, m/s^2.
    pub safe_decel: f64,
    /// Hardest braking the driver expects from its leader, m/s^2.
    pub leader_decel: f64,
    /// Reaction time in the safe-speed rule, s.
    pub reaction: f64,
    /// Bumper gap kept at standstill, m.
    pub standstill: f64,
}

impl Default for DriverGains {
    fn default() -> Self {
        Self { position: 0.4, speed: 1.0, max_correction: 8.0, u_min: -4.0, u_max: 3.0, v_max: 30.0, relax_rate: 0.4, safe_decel: 3.0, leader_decel: 4.0, reaction: 0.6, standstill: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdvDriverParams {
    pub desired_tau: f64,
    /// Speed driven when no leader constrains the driver, m/s.
    pub free_speed: f64,
    pub drift: Vec<DriftSegment>,
    /// Stationary standard deviation of the time-shift noise, s.
    pub tau_noise_std: f64,
    /// Mean-reversion rate of the time-shift noise, 1/s.
    pub tau_noise_rate: f64,
}

/// One driver's parameters plus its noise and relaxation state.
#[derive(Debug, Clone, PartialEq)]
pub struct HdvDriver {
    pub params: HdvDriverParams,
    noise: f64,
    leader: Option<VehicleId>,
    relax_offset: f64,
}

const MIN_EFFECTIVE_TAU: f64 = 0.3;

impl HdvDriver {
    pub fn new(params: HdvDriverParams) -> Self {
        Self { params, noise: 0.0, leader: None, relax_offset: 0.0 }
    }

    pub fn leader(&self) -> Option<VehicleId> {
        self.leader
    }

    /// Switches to `leader`; `observed` is the current time shift to it, if known.
    pub fn follow(&mut self, leader: Option<VehicleId>, observed: Option<f64>, t: f64) {
        if leader == self.leader {
            return;
        }
        self.leader = leader;
        self.relax_offset = match (leader, observed) {
            (Some(_), Some(o)) => o.max(0.0) - self.tau_at(t),
            _ => 0.0,
        };
    }

    pub fn relax(&mut self, rate: f64, dt: f64) {
        let step = rate * dt;
        self.relax_offset = if self.relax_offset.abs() <= step { 0.0 } else { self.relax_offset - step.copysign(self.relax_offset) };
    }

    /// Time shift actually tracked: desired plus what is left of the relaxation.
    pub fn effective_tau(&self, t: f64) -> f64 {
        (self.tau_at(t) + self.relax_offset).max(0.0)
    }

    /// Time shift the driver is currently trying to keep.
    pub fn tau_at(&self, t: f64) -> f64 {
        let drift: f64 = self.params.drift.iter().map(|d| d.offset(t)).sum();
        (self.params.desired_tau + drift + self.noise).max(MIN_EFFECTIVE_TAU)
    }

    /// Exact Ornstein-Uhlenbeck update over `dt`.
    pub fn update_noise<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) {
        let std = self.params.tau_noise_std;
        if std <= 0.0 {
            return;
        }
        let decay = (-self.params.tau_noise_rate * dt).exp();
        let n: f64 = rng.sample(StandardNormal);
        self.noise = self.noise * decay + std * (1.0 - decay * decay).sqrt() * n;
    }
}

/// What the driver sees of its leader.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderCue {
    /// Newell target position and speed.
    pub p_ref: f64,
    pub v_ref: f64,
    /// Current bumper distance to the leader and its speed.
    pub gap: f64,
    pub leader_v: f64,
}

/// Gipps' safe speed: the highest speed from which the follower, reacting
/// after `reaction` and braking at `safe_decel`, still stops `standstill`
/// behind a leader braking at `leader_decel`.
pub fn safe_speed(gap: f64, v: f64, leader_v: f64, gains: &DriverGains) -> f64 {
    let b = gains.safe_decel;
    let r = gains.reaction;
    let disc = b * b * r * r + b * (2.0 * (gap - gains.standstill) - v * r + leader_v * leader_v / gains.leader_decel);
    (-b * r + disc.max(0.0).sqrt()).max(0.0)
}

/// Acceleration of a driver with free-flow speed `free_speed`.
///
/// The commanded speed is the smaller of the free-flow speed and the Newell
/// target speed plus a bounded correction proportional to the position
/// error. The step never ends above the safe speed behind the leader, and
/// the result is clipped to the comfort bounds and so that the next speed
/// stays in `[0, v_max]`.
pub fn hdv_driver_step(p: f64, v: f64, free_speed: f64, cue: Option<LeaderCue>, gains: &DriverGains, dt: f64) -> f64 {
    let mut v_cmd = free_speed;
    let mut u_cap = f64::INFINITY;
    if let Some(c) = cue {
        let correction = (gains.position * (c.p_ref - p)).clamp(-gains.max_correction, gains.max_correction);
        v_cmd = v_cmd.min(c.v_ref + correction);
        u_cap = (safe_speed(c.gap, v, c.leader_v, gains) - v) / dt;
    }
    let u = (gains.speed * (v_cmd - v)).min(u_cap);
    let lo = gains.u_min.max(-v / dt);
    let hi = gains.u_max.min((gains.v_max - v) / dt);
    u.clamp(lo, hi.max(lo))
}
