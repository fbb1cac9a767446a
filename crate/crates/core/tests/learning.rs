use proptest::prelude::*;

use cav_merge::blr::{self, confidence_interval, Dataset, GaussianPred};
use cav_merge::humanmodel::{
    assign_leaders, observe_time_shift, train_time_shift_model, FeatureScale, LeaderRef, Sample, TimeShiftDist,
    TrajHistory, VehicleView,
};
use cav_merge::polytraj::{solve_boundary_coefficients, time_at_position, AffineTraj, CubicTraj, Trajectory};
use cav_merge::sim::{Road, VehicleId};
use cav_merge::uncertainty::{
    cubic_moments, gaussian_moments, mean_trajectory, position_moments, predict_merge_time, tightening_factor,
};

fn dataset() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, -3.0..3.0f64), 5..40).prop_map(|rows| {
        let xs = rows.iter().map(|&(a, b, _)| vec![1.0, a, b]).collect();
        let ys = rows.iter().map(|&(a, b, e)| 1.5 + 0.3 * a - 0.2 * b + 0.05 * e).collect();
        (xs, ys)
    })
}

proptest! {
    #[test]
    fn posterior_covariance_is_symmetric_positive((xs, ys) in dataset(), alpha in 1e-3..1e2f64, beta in 1e-2..1e4f64) {
        let post = blr::fit(&Dataset::new(xs, ys).unwrap(), alpha, beta).unwrap();
        let s = post.covariance();
        prop_assert!((&s - s.transpose()).amax() < 1e-12 * (1.0 + s.amax()));
        prop_assert!(s.clone().cholesky().is_some());
    }

    #[test]
    fn predictive_variance_has_noise_floor((xs, ys) in dataset(), x1 in -1.0..2.0f64, x2 in -1.0..2.0f64) {
        let data = Dataset::new(xs, ys).unwrap();
        let (alpha, beta) = blr::empirical_bayes(&data, 200, 1e-8).unwrap();
        prop_assert!((blr::ALPHA_MIN..=blr::ALPHA_MAX).contains(&alpha));
        prop_assert!((blr::BETA_MIN..=blr::BETA_MAX).contains(&beta));
        let post = blr::fit(&data, alpha, beta).unwrap();
        let p = blr::predict(&post, &[1.0, x1, x2]).unwrap();
        prop_assert!(p.sigma2 >= 1.0 / beta);
    }

    #[test]
    fn interval_widens_with_confidence(mu in -5.0..5.0f64, s2 in 1e-4..4.0f64, z1 in 0.05..0.5f64, dz in 0.01..0.45f64) {
        let pred = GaussianPred::new(mu, s2);
        let (lo1, hi1) = confidence_interval(&pred, z1);
        let (lo2, hi2) = confidence_interval(&pred, z1 + dz);
        prop_assert!(lo2 < lo1 && hi2 > hi1);
        prop_assert!(((lo1 + hi1) / 2.0 - mu).abs() < 1e-9);
    }

    #[test]
    fn moments_reduce_to_powers(mu in -5.0..5.0f64, n in 1u32..=6) {
        let exact = mu.powi(n as i32);
        prop_assert!((gaussian_moments(mu, 0.0, n).unwrap() - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
    }

    #[test]
    fn even_moments_grow_with_variance(mu in -3.0..3.0f64, s in 0.0..2.0f64, ds in 0.01..1.0f64, k in 1u32..=3) {
        let n = 2 * k;
        prop_assert!(gaussian_moments(mu, s + ds, n).unwrap() > gaussian_moments(mu, s, n).unwrap());
    }

    #[test]
    fn zero_variance_is_the_exact_newell_shift(v0 in 8.0..25.0f64, mu in 0.8..2.5f64, w in 2.0..4.0f64, frac in 0.0..1.0f64) {
        let leader = solve_boundary_coefficients(3.0, v0, 3.0 + 430.0 / v0 * 1.1, -350.0, 80.0).unwrap();
        let tau = TimeShiftDist { mu_tau: mu, sigma2_tau: 0.0, stored_at: 0.0 };
        let t = leader.t_start + mu + frac * (leader.t_end - leader.t_start);
        let (m, v) = cubic_moments(&leader, &tau, w, t);
        prop_assert!((m - (leader.position(t - mu) - w * mu)).abs() < 1e-9);
        prop_assert!(v == 0.0);
        let merge = predict_merge_time(&Trajectory::Cubic(leader), &tau, w, 80.0).unwrap();
        let exact = time_at_position(&Trajectory::Cubic(leader), w * mu).unwrap() + mu;
        prop_assert!((merge.mu - exact).abs() < 1e-9 && merge.sigma2 == 0.0);
    }

    #[test]
    fn mean_polynomial_matches_moments(v0 in 8.0..25.0f64, mu in 0.8..2.5f64, s2 in 0.0..0.3f64, w in 2.0..4.0f64, frac in 0.0..1.0f64) {
        let leader = Trajectory::Cubic(solve_boundary_coefficients(40.0, v0, 40.0 + 430.0 / v0 * 1.2, -350.0, 80.0).unwrap());
        let tau = TimeShiftDist { mu_tau: mu, sigma2_tau: s2, stored_at: 0.0 };
        let (lo, hi) = leader.window();
        let t = lo + mu + frac * (hi - lo);
        let (m, var) = position_moments(&leader, &tau, w, t);
        prop_assert!((mean_trajectory(&leader, &tau, w).position(t) - m).abs() < 1e-9);
        prop_assert!(var >= 0.0);
        // merge variance is the time-shift variance
        prop_assert_eq!(predict_merge_time(&leader, &tau, w, 80.0).unwrap().sigma2, s2);
    }

    #[test]
    fn affine_leader_variance(v in 5.0..30.0f64, mu in 0.8..2.5f64, s2 in 0.0..0.3f64, w in 2.0..4.0f64) {
        let leader = AffineTraj::new(v, -300.0, 0.0, 60.0).unwrap();
        let tau = TimeShiftDist { mu_tau: mu, sigma2_tau: s2, stored_at: 0.0 };
        let (_, var) = position_moments(&Trajectory::Affine(leader), &tau, w, 20.0);
        prop_assert!((var - (v + w).powi(2) * s2).abs() < 1e-9 * (1.0 + var));
        let (_, var_c) = cubic_moments(&leader.to_cubic(), &tau, w, 20.0);
        prop_assert!((var - var_c).abs() < 1e-9 * (1.0 + var));
    }

    #[test]
    fn tightening_is_odd(xi in 0.5..0.999f64) {
        prop_assert!((tightening_factor(xi) + tightening_factor(1.0 - xi)).abs() < 1e-9);
        prop_assert!(tightening_factor(xi) >= 0.0);
    }

    #[test]
    fn leaders_are_ahead_and_unique(ps in prop::collection::vec((-400.0..80.0f64, any::<bool>()), 1..12)) {
        let views: Vec<_> = ps
            .iter()
            .enumerate()
            .map(|(i, &(p, a))| VehicleView { id: VehicleId(i as u64 + 1), road: if a { Road::A } else { Road::B }, p })
            .collect();
        let out = assign_leaders(&views, 0.0, 100.0);
        prop_assert_eq!(out.len(), views.len());
        for v in &views {
            let a = out[&v.id];
            match a.leader {
                LeaderRef::Vehicle(j) => {
                    let l = views.iter().find(|x| x.id == j).unwrap();
                    prop_assert!(l.p > v.p);
                    prop_assert_eq!(a.projected, l.road != v.road && l.p < 0.0);
                }
                // nobody visible ahead on the own road
                LeaderRef::Virtual => prop_assert!(!views.iter().any(|x| x.road == v.road && x.p > v.p)),
            }
        }
    }
}

fn history(f: impl Fn(f64) -> f64, t_end: f64) -> TrajHistory {
    let n = (t_end / 0.1).round() as usize;
    TrajHistory::from_samples(
        (0..=n).map(|i| {
            let t = i as f64 * 0.1;
            Sample { t, p: f(t), v: (f(t + 1e-4) - f(t - 1e-4)) / 2e-4 }
        }),
        n + 1,
    )
}

#[test]
fn training_recovers_the_driver_shift() {
    let leader = CubicTraj::new(0.0, -0.04, 16.0, -250.0, 0.0, 40.0);
    let (w, tau) = (10.0 / 3.0, 1.7);
    let lead_hist = history(|t| leader.position(t), 30.0);
    let ego = history(|t| leader.position(t - tau) - w * tau, 30.0);
    assert!((observe_time_shift(&ego, &lead_hist, w, 20.0).unwrap() - tau).abs() < 1e-3);
    let scale = FeatureScale { p_start: -350.0, p_end: 80.0 };
    let m = train_time_shift_model(&ego, &lead_hist, w, 25.0, 20, &scale).unwrap();
    assert_eq!(m.dataset_len, 20);
    assert!((m.tau.mu_tau - tau).abs() < 5e-3, "{:?}", m.tau);
    assert!(m.tau.sigma2_tau < 0.01);
}

#[test]
fn projection_zone_maps_across_roads() {
    let views = [
        VehicleView { id: VehicleId(1), road: Road::A, p: -40.0 },
        VehicleView { id: VehicleId(2), road: Road::B, p: -60.0 },
        VehicleView { id: VehicleId(3), road: Road::B, p: -200.0 },
    ];
    let out = assign_leaders(&views, 0.0, 100.0);
    assert_eq!(out[&VehicleId(2)].leader, LeaderRef::Vehicle(VehicleId(1)));
    assert!(out[&VehicleId(2)].projected);
    // outside the projection zone only the own road counts
    assert_eq!(out[&VehicleId(3)].leader, LeaderRef::Vehicle(VehicleId(2)));
    assert_eq!(out[&VehicleId(1)].leader, LeaderRef::Virtual);
}
