//! Cubic and affine position trajectories.
//!
//! The cubic is the unconstrained energy-optimal motion primitive: with the
//! terminal condition `u(tf) = 0` the acceleration is affine in time, so the
//! speed is a parabola whose vertex sits exactly at the exit time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shortest boundary window accepted by [`solve_boundary_coefficients`].
pub const MIN_HORIZON: f64 = 1e-6;

const CARDANO_EPS: f64 = 1e-12;
const PHI3_EPS: f64 = 1e-12;
const INVERSION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolyError {
    #[error("boundary system is singular: horizon {horizon:e} s is below {MIN_HORIZON:e} s")]
    SingularSystem { horizon: f64 },
    #[error("cubic discriminant {disc:e} is not positive at p = {position}")]
    Discriminant { position: f64, disc: f64 },
    #[error("position {position} outside trajectory image [{lo}, {hi}]")]
    OutOfRange { position: f64, lo: f64, hi: f64 },
    #[error("affine trajectory needs a positive speed, got {0}")]
    NonPositiveSpeed(f64),
}

/// `p(t) = phi3 s^3 + phi2 s^2 + phi1 s + phi0` with `s = t - t_ref`, valid
/// on `[t_start, t_end]`.
///
/// With `t_ref = 0` the coefficients are in absolute time. Synthesized
/// trajectories keep their start as the origin so that late clock values do
/// not cost precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicTraj {
    pub phi3: f64,
    pub phi2: f64,
    pub phi1: f64,
    pub phi0: f64,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default)]
    pub t_ref: f64,
}

/// Constant-speed trajectory `p(t) = phi1 t + phi0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTraj {
    pub phi1: f64,
    pub phi0: f64,
    pub t_start: f64,
    pub t_end: f64,
}

/// Speed relaxation toward `desired` with gain `gain`, acceleration capped
/// at `u_max` and never braking. Used for traffic downstream of the exit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeFlowLaw {
    pub desired: f64,
    pub gain: f64,
    pub u_max: f64,
}

impl FreeFlowLaw {
    /// Position `elapsed` seconds after being at `p` with speed `v`, in
    /// continuous time.
    pub fn position(&self, p: f64, v: f64, elapsed: f64) -> f64 {
        let s = elapsed.max(0.0);
        if v >= self.desired || self.gain <= 0.0 {
            return p + v * s;
        }
        // speed below which the acceleration cap binds
        let v_knee = self.desired - self.u_max / self.gain;
        let (mut p, mut v, mut s) = (p, v, s);
        if v < v_knee {
            let t_cap = (v_knee - v) / self.u_max;
            if s <= t_cap {
                return p + v * s + 0.5 * self.u_max * s * s;
            }
            p += v * t_cap + 0.5 * self.u_max * t_cap * t_cap;
            v = v_knee;
            s -= t_cap;
        }
        let gap = self.desired - v;
        p + self.desired * s - gap * (1.0 - (-self.gain * s).exp()) / self.gain
    }
}

/// Either motion family; HDV mean predictions take whichever shape their
/// leader has.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Cubic(CubicTraj),
    Affine(AffineTraj),
}

/// Position, speed and acceleration at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub p: f64,
    pub v: f64,
    pub u: f64,
}

/// Depressed-cubic parameters for closed-form position-to-time inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CardanoParams {
    pub omega3: f64,
    pub omega2: f64,
    pub omega1: f64,
    pub omega0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub t_lower: f64,
    pub t_upper: f64,
}

/// Actuation and speed limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

/// Which route [`invert_position`] took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionPath {
    Cardano,
    Polynomial,
    Bisection,
    Affine,
}

impl CubicTraj {
    pub fn new(phi3: f64, phi2: f64, phi1: f64, phi0: f64, t_start: f64, t_end: f64) -> Self {
        Self { phi3, phi2, phi1, phi0, t_start, t_end, t_ref: 0.0 }
    }

    /// Coefficients about `t_ref`.
    pub fn coefficients(&self) -> [f64; 4] {
        [self.phi3, self.phi2, self.phi1, self.phi0]
    }

    /// Coefficients in absolute time.
    pub fn absolute_coefficients(&self) -> [f64; 4] {
        let (a, b, c, d, r) = (self.phi3, self.phi2, self.phi1, self.phi0, self.t_ref);
        [a, b - 3.0 * a * r, c + (3.0 * a * r - 2.0 * b) * r, d + ((b - a * r) * r - c) * r]
    }

    pub fn position(&self, t: f64) -> f64 {
        let s = t - self.t_ref;
        ((self.phi3 * s + self.phi2) * s + self.phi1) * s + self.phi0
    }

    pub fn speed(&self, t: f64) -> f64 {
        let s = t - self.t_ref;
        (3.0 * self.phi3 * s + 2.0 * self.phi2) * s + self.phi1
    }

    pub fn accel(&self, t: f64) -> f64 {
        6.0 * self.phi3 * (t - self.t_ref) + 2.0 * self.phi2
    }

    pub fn eval(&self, t: f64) -> Kinematics {
        Kinematics { p: self.position(t), v: self.speed(t), u: self.accel(t) }
    }

    pub fn with_window(mut self, t_start: f64, t_end: f64) -> Self {
        self.t_start = t_start;
        self.t_end = t_end;
        self
    }

    /// Closed-form inversion parameters; the roots they give are in time
    /// relative to `t_ref`.
    pub fn cardano_params(&self) -> CardanoParams {
        let a = self.phi2 / self.phi3;
        let b = self.phi1 / self.phi3;
        CardanoParams {
            omega0: b - a * a / 3.0,
            omega1: (2.0 * a * a * a - 9.0 * self.phi2 * self.phi1 / (self.phi3 * self.phi3)) / 27.0
                + self.phi0 / self.phi3,
            omega2: -1.0 / self.phi3,
            omega3: -a / 3.0,
        }
    }
}

impl CardanoParams {
    pub fn discriminant(&self, p: f64) -> f64 {
        let q = self.omega1 + self.omega2 * p;
        0.25 * q * q + self.omega0.powi(3) / 27.0
    }

    /// Closed-form time at which the cubic reaches `p`.
    pub fn time_at(&self, p: f64) -> Result<f64, PolyError> {
        let disc = self.discriminant(p);
        if !(disc > CARDANO_EPS) {
            return Err(PolyError::Discriminant { position: p, disc });
        }
        let half_q = -0.5 * (self.omega1 + self.omega2 * p);
        let root = disc.sqrt();
        Ok((half_q + root).cbrt() + (half_q - root).cbrt() + self.omega3)
    }
}

impl AffineTraj {
    pub fn new(phi1: f64, phi0: f64, t_start: f64, t_end: f64) -> Result<Self, PolyError> {
        if !(phi1 > 0.0) || !phi1.is_finite() {
            return Err(PolyError::NonPositiveSpeed(phi1));
        }
        Ok(Self { phi1, phi0, t_start, t_end })
    }

    pub fn position(&self, t: f64) -> f64 {
        self.phi1 * t + self.phi0
    }

    pub fn eval(&self, t: f64) -> Kinematics {
        Kinematics { p: self.position(t), v: self.phi1, u: 0.0 }
    }

    pub fn time_at(&self, p: f64) -> f64 {
        (p - self.phi0) / self.phi1
    }

    /// The same line as a cubic with zero higher-order terms.
    pub fn to_cubic(&self) -> CubicTraj {
        CubicTraj::new(0.0, 0.0, self.phi1, self.phi0, self.t_start, self.t_end)
    }
}

impl Trajectory {
    pub fn eval(&self, t: f64) -> Kinematics {
        match self {
            Trajectory::Cubic(c) => c.eval(t),
            Trajectory::Affine(a) => a.eval(t),
        }
    }

    pub fn position(&self, t: f64) -> f64 {
        match self {
            Trajectory::Cubic(c) => c.position(t),
            Trajectory::Affine(a) => a.position(t),
        }
    }

    /// Position that continues at the end speed after the window closes.
    pub fn position_or_cruise(&self, t: f64) -> f64 {
        let end = self.window().1;
        if t <= end {
            self.position(t)
        } else {
            let k = self.eval(end);
            k.p + k.v * (t - end)
        }
    }

    pub fn window(&self) -> (f64, f64) {
        match self {
            Trajectory::Cubic(c) => (c.t_start, c.t_end),
            Trajectory::Affine(a) => (a.t_start, a.t_end),
        }
    }

    pub fn with_window(self, t_start: f64, t_end: f64) -> Self {
        match self {
            Trajectory::Cubic(c) => Trajectory::Cubic(c.with_window(t_start, t_end)),
            Trajectory::Affine(mut a) => {
                a.t_start = t_start;
                a.t_end = t_end;
                Trajectory::Affine(a)
            }
        }
    }
}

impl From<CubicTraj> for Trajectory {
    fn from(c: CubicTraj) -> Self {
        Trajectory::Cubic(c)
    }
}

impl From<AffineTraj> for Trajectory {
    fn from(a: AffineTraj) -> Self {
        Trajectory::Affine(a)
    }
}

/// Energy-optimal cubic through `(t0, p0, v0)` reaching `pf` at `tf` with
/// zero terminal acceleration.
///
/// The 4x4 boundary system is solved in time shifted to `t0`, where it
/// reduces to two unknowns; `t0` stays the origin of the coefficients.
pub fn solve_boundary_coefficients(
    t0: f64,
    v0: f64,
    tf: f64,
    p0: f64,
    pf: f64,
) -> Result<CubicTraj, PolyError> {
    let horizon = tf - t0;
    if !(horizon >= MIN_HORIZON) {
        return Err(PolyError::SingularSystem { horizon });
    }
    // p(s) = a s^3 + b s^2 + v0 s + p0 with s = t - t0
    let dist = pf - p0;
    let a = (v0 * horizon - dist) / (2.0 * horizon.powi(3));
    let b = -3.0 * a * horizon;
    Ok(CubicTraj { phi3: a, phi2: b, phi1: v0, phi0: p0, t_start: t0, t_end: tf, t_ref: t0 })
}

/// Time at which `traj` passes `p`, within its validity window.
pub fn time_at_position(traj: &Trajectory, p: f64) -> Result<f64, PolyError> {
    invert_position(traj, p).map(|(t, _)| t)
}

/// Like [`time_at_position`] but also reports which inversion route was used.
///
/// Cubics go through the closed-form Cardano expression first; if the
/// discriminant is not positive, or the root lands off the window, the
/// monotone cubic is bracketed and bisected instead.
pub fn invert_position(traj: &Trajectory, p: f64) -> Result<(f64, InversionPath), PolyError> {
    match traj {
        Trajectory::Affine(a) => Ok((a.time_at(p), InversionPath::Affine)),
        Trajectory::Cubic(c) => invert_cubic(c, p),
    }
}

fn invert_cubic(c: &CubicTraj, p: f64) -> Result<(f64, InversionPath), PolyError> {
    let (p_lo, p_hi) = (c.position(c.t_start), c.position(c.t_end));
    let slack = INVERSION_TOL.max(1e-9 * p_lo.abs().max(p_hi.abs()));
    if !(p >= p_lo - slack && p <= p_hi + slack) {
        return Err(PolyError::OutOfRange { position: p, lo: p_lo, hi: p_hi });
    }
    let tol_t = 1e-9 * (1.0 + c.t_end.abs());
    let in_window = |t: f64| t >= c.t_start - tol_t && t <= c.t_end + tol_t;

    if c.phi3.abs() < PHI3_EPS {
        if let Some(t) = lower_order_root(c, p).filter(|t| in_window(*t)) {
            return Ok((polish(c, p, t), InversionPath::Polynomial));
        }
    } else if let Ok(t) = c.cardano_params().time_at(p).map(|s| s + c.t_ref) {
        if t.is_finite() && in_window(t) {
            let t = polish(c, p, t);
            if (c.position(t) - p).abs() < INVERSION_TOL {
                return Ok((t, InversionPath::Cardano));
            }
        }
    }
    Ok((bisect_monotone(c, p), InversionPath::Bisection))
}

/// Root of the quadratic/linear cubic with `phi3 ~ 0`, picked inside the window.
fn lower_order_root(c: &CubicTraj, p: f64) -> Option<f64> {
    let (a, b, k) = (c.phi2, c.phi1, c.phi0 - p);
    if a.abs() < PHI3_EPS {
        return (b != 0.0).then(|| c.t_ref - k / b);
    }
    let disc = b * b - 4.0 * a * k;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // numerically stable pair
    let q = -0.5 * (b + b.signum() * sq);
    let mut roots = [q / a, if q != 0.0 { k / q } else { f64::NAN }].map(|r| r + c.t_ref);
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    let mid = 0.5 * (c.t_start + c.t_end);
    roots
        .into_iter()
        .filter(|r| r.is_finite())
        .min_by(|x, y| (x - mid).abs().total_cmp(&(y - mid).abs()))
}

/// Two safeguarded Newton steps to clean up cancellation in absolute time.
fn polish(c: &CubicTraj, p: f64, mut t: f64) -> f64 {
    for _ in 0..2 {
        let v = c.speed(t);
        if v.abs() < 1e-9 {
            break;
        }
        let step = (c.position(t) - p) / v;
        if !step.is_finite() || step.abs() > 1.0 {
            break;
        }
        t -= step;
    }
    t
}

fn bisect_monotone(c: &CubicTraj, p: f64) -> f64 {
    let (mut lo, mut hi) = (c.t_start, c.t_end);
    if c.position(lo) >= p {
        return lo;
    }
    if c.position(hi) <= p {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if c.position(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * (1.0 + hi.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Earliest and latest arrival at `pf` from `(p_now, v_now)`.
///
/// The earliest arrival accelerates at `u_max` up to `v_max` and cruises;
/// the latest decelerates at `u_min` down to `v_min` and cruises.
pub fn feasible_time_range(p_now: f64, v_now: f64, pf: f64, t_now: f64, limits: &Limits) -> TimeWindow {
    let dist = (pf - p_now).max(0.0);
    let v = v_now.clamp(limits.v_min, limits.v_max);

    let fast = {
        let acc = limits.u_max;
        let ramp = (limits.v_max * limits.v_max - v * v) / (2.0 * acc);
        if ramp >= dist {
            ((v * v + 2.0 * acc * dist).sqrt() - v) / acc
        } else {
            (limits.v_max - v) / acc + (dist - ramp) / limits.v_max
        }
    };
    let slow = {
        let dec = -limits.u_min;
        let ramp = (v * v - limits.v_min * limits.v_min) / (2.0 * dec);
        if ramp >= dist {
            (v - (v * v - 2.0 * dec * dist).max(0.0).sqrt()) / dec
        } else {
            (v - limits.v_min) / dec + (dist - ramp) / limits.v_min
        }
    };
    TimeWindow { t_lower: t_now + fast, t_upper: t_now + slow.max(fast) }
}

/// Half the integral of squared acceleration over the window.
pub fn control_effort(c: &CubicTraj) -> f64 {
    // u is affine, so Simpson's rule is exact for u^2
    let (a, b) = (c.t_start, c.t_end);
    let (ua, um, ub) = (c.accel(a), c.accel(0.5 * (a + b)), c.accel(b));
    0.5 * (b - a) / 6.0 * (ua * ua + 4.0 * um * um + ub * ub)
}
