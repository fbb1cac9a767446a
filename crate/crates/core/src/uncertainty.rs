//! Moment propagation of a Gaussian time shift through the Newell relation
//! `p_k(t) = p_j(t - tau) - w tau`.
//!
//! For a cubic (or affine) leader the follower's position is a polynomial in
//! the Gaussian variable `t - tau`, so its mean and variance follow exactly
//! from the raw moments of a normal variable up to order six.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blr::GaussianPred;
use crate::humanmodel::TimeShiftDist;
use crate::polytraj::{time_at_position, AffineTraj, CubicTraj, PolyError, Trajectory};
use crate::sim::VehicleId;
use crate::special::normal_quantile;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UncertaintyError {
    #[error("moment order {0} is not supported (1..=6)")]
    UnsupportedOrder(u32),
    #[error("w * (mu_tau + 4 sigma_tau) = {reach} m exceeds the control-zone exit {p_exit} m")]
    WaveAssumption { reach: f64, p_exit: f64 },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// `E[x^n]` for `x ~ N(mu, sigma2)`, `n` in `1..=6`.
pub fn gaussian_moments(mu: f64, sigma2: f64, n: u32) -> Result<f64, UncertaintyError> {
    let (m, s) = (mu, sigma2);
    let m2 = m * m;
    Ok(match n {
        1 => m,
        2 => m2 + s,
        3 => m * (m2 + 3.0 * s),
        4 => m2 * m2 + 6.0 * m2 * s + 3.0 * s * s,
        5 => m * (m2 * m2 + 10.0 * m2 * s + 15.0 * s * s),
        6 => m2 * m2 * m2 + 15.0 * m2 * m2 * s + 45.0 * m2 * s * s + 15.0 * s * s * s,
        other => return Err(UncertaintyError::UnsupportedOrder(other)),
    })
}

/// Mean and variance of a follower position, plus the mean as a polynomial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagated<T> {
    pub mu_p: f64,
    pub sigma2_p: f64,
    pub mean_coeffs: T,
}

/// Follower statistics behind a cubic leader at time `t`.
pub fn propagate_cubic(leader: &CubicTraj, tau: &TimeShiftDist, w: f64, t: f64) -> Propagated<CubicTraj> {
    let (mu_p, sigma2_p) = cubic_moments(leader, tau, w, t);
    Propagated { mu_p, sigma2_p, mean_coeffs: cubic_mean_coeffs(leader, tau, w) }
}

/// Mean and variance only; the hot path for constraint checks.
pub fn cubic_moments(leader: &CubicTraj, tau: &TimeShiftDist, w: f64, t: f64) -> (f64, f64) {
    let [f3, f2, f1, f0] = leader.coefficients();
    let s = tau.sigma2_tau.max(0.0);
    // local time keeps late clocks from eating precision; the -w tau term
    // is -w (t - t_ref - lam) in local time
    let lam = t - leader.t_ref - tau.mu_tau;
    let f1w = f1 + w;
    let mu = f3 * (lam * lam * lam + 3.0 * lam * s) + f2 * (lam * lam + s) + f1w * lam + (f0 - w * (t - leader.t_ref));
    let lam2 = lam * lam;
    let var = s
        * (f1w * f1w
            + 4.0 * f1w * f2 * lam
            + 6.0 * f1w * f3 * lam2
            + 6.0 * f1w * f3 * s
            + 4.0 * f2 * f2 * lam2
            + 2.0 * f2 * f2 * s
            + 12.0 * f2 * f3 * lam2 * lam
            + 24.0 * f2 * f3 * lam * s
            + 36.0 * f3 * f3 * lam2 * s
            + 15.0 * f3 * f3 * s * s
            + 9.0 * f3 * f3 * lam2 * lam2);
    (mu, var.max(0.0))
}

/// The mean `E[p_k(t)]` re-expressed as a cubic in `t`.
pub fn cubic_mean_coeffs(leader: &CubicTraj, tau: &TimeShiftDist, w: f64) -> CubicTraj {
    let [f3, f2, f1, f0] = leader.coefficients();
    let (m, s) = (tau.mu_tau, tau.sigma2_tau.max(0.0));
    let second = m * m + s;
    CubicTraj {
        phi3: f3,
        phi2: f2 - 3.0 * f3 * m,
        phi1: f1 - 2.0 * f2 * m + 3.0 * f3 * second,
        phi0: f0 - (f1 + w) * m + f2 * second - f3 * m * (m * m + 3.0 * s),
        t_start: leader.t_start + m,
        t_end: leader.t_end + m,
        t_ref: leader.t_ref,
    }
}

/// Follower statistics behind a constant-speed leader.
pub fn propagate_affine(leader: &AffineTraj, tau: &TimeShiftDist, w: f64, t: f64) -> Propagated<AffineTraj> {
    let lam = t - tau.mu_tau;
    let f1w = leader.phi1 + w;
    Propagated {
        mu_p: f1w * lam + (leader.phi0 - w * t),
        sigma2_p: f1w * f1w * tau.sigma2_tau.max(0.0),
        mean_coeffs: AffineTraj {
            phi1: leader.phi1,
            phi0: leader.phi0 - f1w * tau.mu_tau,
            t_start: leader.t_start + tau.mu_tau,
            t_end: leader.t_end + tau.mu_tau,
        },
    }
}

/// Mean and variance of the follower position for either leader shape.
pub fn position_moments(leader: &Trajectory, tau: &TimeShiftDist, w: f64, t: f64) -> (f64, f64) {
    match leader {
        Trajectory::Cubic(c) => cubic_moments(c, tau, w, t),
        Trajectory::Affine(a) => {
            let p = propagate_affine(a, tau, w, t);
            (p.mu_p, p.sigma2_p)
        }
    }
}

/// Mean trajectory of the follower for either leader shape.
pub fn mean_trajectory(leader: &Trajectory, tau: &TimeShiftDist, w: f64) -> Trajectory {
    match leader {
        Trajectory::Cubic(c) => Trajectory::Cubic(cubic_mean_coeffs(c, tau, w)),
        Trajectory::Affine(a) => Trajectory::Affine(propagate_affine(a, tau, w, a.t_start).mean_coeffs),
    }
}

/// Gaussian merging time `t_j(w mu_tau) + mu_tau` with variance `sigma2_tau`.
///
/// The leader is inverted at the mean reach `w mu_tau` only. `p_exit` bounds
/// the reach `w (mu_tau + 4 sigma_tau)` so the inversion stays inside the
/// control zone.
pub fn predict_merge_time(
    leader_traj: &Trajectory,
    tau: &TimeShiftDist,
    w: f64,
    p_exit: f64,
) -> Result<GaussianPred, UncertaintyError> {
    let reach = w * (tau.mu_tau + 4.0 * tau.sigma2_tau.max(0.0).sqrt());
    if reach > p_exit {
        return Err(UncertaintyError::WaveAssumption { reach, p_exit });
    }
    let t_leader = time_at_position(leader_traj, w * tau.mu_tau)?;
    Ok(GaussianPred { mu: tau.mu_tau + t_leader, sigma2: tau.sigma2_tau })
}

/// `z = sqrt(2) erf^{-1}(2 xi - 1)`, the `xi`-quantile of `N(0, 1)`.
pub fn tightening_factor(xi: f64) -> f64 {
    normal_quantile(xi)
}

/// Everything the planner needs about one HDV's future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdvPrediction {
    pub mean_traj: Trajectory,
    pub tau: TimeShiftDist,
    /// Trajectory of the (possibly virtual) leader the moments derive from.
    pub leader_traj: Trajectory,
    pub leader_ref: Option<VehicleId>,
    pub w: f64,
    pub merge_time: GaussianPred,
    pub exit_time_mean: f64,
}

impl HdvPrediction {
    /// Moments at `t`; once the leader's known window has run out the mean
    /// continues at its last speed and the variance is held.
    pub fn position_moments(&self, t: f64) -> (f64, f64) {
        let t_known = self.leader_traj.window().1 + self.tau.mu_tau;
        if t <= t_known {
            return position_moments(&self.leader_traj, &self.tau, self.w, t);
        }
        let (mu, var) = position_moments(&self.leader_traj, &self.tau, self.w, t_known);
        let v = self.mean_traj.eval(t_known).v.max(0.0);
        (mu + v * (t - t_known), var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau(mu: f64, s2: f64) -> TimeShiftDist {
        TimeShiftDist { mu_tau: mu, sigma2_tau: s2, stored_at: 0.0 }
    }

    #[test]
    fn deterministic_moments_are_powers() {
        assert_eq!(gaussian_moments(2.0, 0.0, 3).unwrap(), 8.0);
        for n in 1..=6 {
            let exact = 1.7f64.powi(n as i32);
            assert!((gaussian_moments(1.7, 0.0, n).unwrap() - exact).abs() <= 4.0 * f64::EPSILON * exact);
        }
        assert_eq!(gaussian_moments(0.0, 1.0, 6).unwrap(), 15.0);
        assert!(matches!(gaussian_moments(0.0, 1.0, 7), Err(UncertaintyError::UnsupportedOrder(7))));
    }

    #[test]
    fn zero_variance_is_exact_newell_shift() {
        let leader = CubicTraj::new(0.001, -0.05, 12.0, -400.0, 0.0, 40.0);
        let p = propagate_cubic(&leader, &tau(1.6, 0.0), 3.0, 10.0);
        assert!((p.mu_p - (leader.position(10.0 - 1.6) - 3.0 * 1.6)).abs() < 1e-12);
        assert_eq!(p.sigma2_p, 0.0);
    }

    #[test]
    fn affine_embedded_in_cubic() {
        let v = 15.0;
        let cubic = CubicTraj::new(0.0, 0.0, v, -100.0, 0.0, 40.0);
        let affine = AffineTraj::new(v, -100.0, 0.0, 40.0).unwrap();
        let t = tau(1.5, 0.01);
        let pc = propagate_cubic(&cubic, &t, 4.0, 5.0);
        let pa = propagate_affine(&affine, &t, 4.0, 5.0);
        assert!((pc.sigma2_p - (v + 4.0f64).powi(2) * 0.01).abs() < 1e-12);
        assert!((pc.mu_p - pa.mu_p).abs() < 1e-12);
        assert!((pc.sigma2_p - pa.sigma2_p).abs() < 1e-12);
        assert!((pc.mean_coeffs.phi1 - pa.mean_coeffs.phi1).abs() < 1e-12);
        assert!((pc.mean_coeffs.phi0 - pa.mean_coeffs.phi0).abs() < 1e-12);
    }

    #[test]
    fn affine_lemma_values() {
        let leader = AffineTraj::new(20.0, 0.0, 0.0, 100.0).unwrap();
        let p = propagate_affine(&leader, &tau(1.5, 0.01), 4.0, 5.0);
        assert!((p.mu_p - (24.0 * 3.5 - 20.0)).abs() < 1e-12);
        assert!((p.sigma2_p - 576.0 * 0.01).abs() < 1e-12);
        assert!((p.mean_coeffs.position(5.0) - p.mu_p).abs() < 1e-12);
    }

    #[test]
    fn mean_polynomial_matches_moments() {
        let leader = CubicTraj::new(-0.002, 0.08, 11.0, -380.0, 0.0, 40.0);
        let t = tau(1.3, 0.09);
        let poly = cubic_mean_coeffs(&leader, &t, 3.3);
        for i in 0..100 {
            let time = i as f64 * 0.4;
            let (mu, var) = cubic_moments(&leader, &t, 3.3, time);
            assert!((poly.position(time) - mu).abs() < 1e-9);
            assert!(var >= 0.0);
        }
    }

    #[test]
    fn merge_time_behind_affine_leader() {
        let v = 18.0;
        let leader: Trajectory = AffineTraj::new(v, 0.0, -30.0, 30.0).unwrap().into();
        let (mu, s2, w) = (1.4, 0.04, 3.0);
        let m = predict_merge_time(&leader, &tau(mu, s2), w, 80.0).unwrap();
        assert!((m.mu - (mu + w * mu / v)).abs() < 1e-12);
        assert_eq!(m.sigma2, s2);
        assert!(matches!(
            predict_merge_time(&leader, &tau(30.0, s2), w, 80.0),
            Err(UncertaintyError::WaveAssumption { .. })
        ));
    }

    #[test]
    fn tightening_quantiles() {
        assert_eq!(tightening_factor(0.5), 0.0);
        assert!((tightening_factor(0.95) - 1.6449).abs() < 1e-3);
        assert!((tightening_factor(0.975) - 1.9600).abs() < 1e-3);
    }
}
