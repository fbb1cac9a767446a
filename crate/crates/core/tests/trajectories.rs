use proptest::prelude::*;

use cav_merge::humanmodel::TrajHistory;
use cav_merge::planner::{
    certify, check_kinematic, plan, EgoState, Forecast, Motion, NeighborSnapshot, PlanMode, PlannerParams, Verdict,
};
use cav_merge::polytraj::{
    control_effort, feasible_time_range, invert_position, solve_boundary_coefficients, time_at_position, AffineTraj,
    CubicTraj, FreeFlowLaw, Trajectory,
};
use cav_merge::blr::GaussianPred;
use cav_merge::sim::{Road, VehicleId};

/// Boundary inputs whose cubic stays monotone: exit speed above 1 m/s.
fn monotone_inputs() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (0.0..600.0f64, 3.0..30.0f64, 50.0..600.0f64).prop_flat_map(|(t0, v0, d)| {
        let t_hi = 1.5 * d / (0.5 * v0 + 1.0);
        ((d / 30.0).max(1.0)..t_hi).prop_map(move |h| (t0, v0, h, d))
    })
}

proptest! {
    #[test]
    fn boundary_conditions_hold((t0, v0, h, d) in monotone_inputs(), p0 in -400.0..0.0f64) {
        let c = solve_boundary_coefficients(t0, v0, t0 + h, p0, p0 + d).unwrap();
        prop_assert!((c.position(t0) - p0).abs() < 1e-9);
        prop_assert!((c.speed(t0) - v0).abs() < 1e-9);
        prop_assert!((c.position(t0 + h) - (p0 + d)).abs() < 1e-9);
        prop_assert!(c.accel(t0 + h).abs() < 1e-9);
        // zero terminal acceleration pins the exit speed
        prop_assert!((c.speed(t0 + h) - (1.5 * d / h - 0.5 * v0)).abs() < 1e-9);
    }

    #[test]
    fn inversion_round_trips((t0, v0, h, d) in monotone_inputs(), frac in 0.0..=1.0f64) {
        let c = solve_boundary_coefficients(t0, v0, t0 + h, -350.0, -350.0 + d).unwrap();
        let t = t0 + frac * h;
        let back = time_at_position(&Trajectory::Cubic(c), c.position(t)).unwrap();
        prop_assert!((back - t).abs() < 1e-6, "t {} back {}", t, back);
    }

    #[test]
    fn absolute_form_agrees((t0, v0, h, d) in monotone_inputs()) {
        let c = solve_boundary_coefficients(t0, v0, t0 + h, -350.0, -350.0 + d).unwrap();
        let [a, b, v, p] = c.absolute_coefficients();
        let abs = CubicTraj::new(a, b, v, p, c.t_start, c.t_end);
        let t = t0 + 0.37 * h;
        // the absolute form loses digits at late clocks; compare relatively
        let scale = 1.0 + a.abs() * t.powi(3) + b.abs() * t * t + v.abs() * t + p.abs();
        prop_assert!((abs.position(t) - c.position(t)).abs() < 1e-12 * scale);
    }

    #[test]
    fn time_range_is_ordered(p in -350.0..0.0f64, v in 0.0..35.0f64) {
        let limits = PlannerParams::default().limits();
        let w = feasible_time_range(p, v, 80.0, 10.0, &limits);
        prop_assert!(w.t_lower > 10.0);
        prop_assert!(w.t_lower <= w.t_upper);
        // nothing beats v_max the whole way, nothing is slower than v_min throughout
        prop_assert!(w.t_lower >= 10.0 + (80.0 - p) / limits.v_max - 1e-9);
        prop_assert!(w.t_upper <= 10.0 + (80.0 - p) / limits.v_min + 1e-9);
    }

    #[test]
    fn energy_optimal_among_perturbations((t0, v0, h, d) in monotone_inputs(), eps in -1.0..1.0f64) {
        let c = solve_boundary_coefficients(t0, v0, t0 + h, 0.0, d).unwrap();
        // q(s) = s^4 - 2.5 h s^3 + 1.5 h^2 s^2 keeps both positions, the start
        // speed and u(tf) = 0; the integrand is quartic so 3-point Gauss is exact
        let scale = 1.0 / h.powi(2);
        let cost = |e: f64| {
            let nodes = [(-(0.6f64).sqrt(), 5.0 / 9.0), (0.0, 8.0 / 9.0), ((0.6f64).sqrt(), 5.0 / 9.0)];
            nodes
                .iter()
                .map(|&(x, wgt)| {
                    let s = 0.5 * h * (x + 1.0);
                    let q2 = e * scale * (12.0 * s * s - 15.0 * h * s + 3.0 * h * h);
                    let u = c.accel(t0 + s) + q2;
                    0.5 * u * u * wgt * 0.5 * h
                })
                .sum::<f64>()
        };
        let j0 = cost(0.0);
        prop_assert!(cost(eps) >= j0 - 1e-9 * (1.0 + j0));
        prop_assert!((j0 - control_effort(&c)).abs() < 1e-9 * (1.0 + j0));
    }

    #[test]
    fn free_flow_forecast_never_overtakes_the_simulation(
        v0 in 0.0..25.0f64,
        desired in 5.0..25.0f64,
        gain in 0.1..2.0f64,
        u_max in 0.5..3.0f64,
    ) {
        let law = FreeFlowLaw { desired, gain, u_max };
        let dt = 0.1;
        let (mut p, mut v) = (0.0, v0);
        for n in 1..=300 {
            let u = (gain * (desired - v)).clamp(0.0, u_max);
            p += v * dt + 0.5 * u * dt * dt;
            v += u * dt;
            let forecast = law.position(0.0, v0, n as f64 * dt);
            prop_assert!(forecast <= p + 1e-9, "step {}: forecast {} sim {}", n, forecast, p);
        }
    }
}

#[test]
fn spec_polynomial_examples() {
    let c = solve_boundary_coefficients(0.0, 10.0, 10.0, 0.0, 100.0).unwrap();
    let [a, b, v, p] = c.absolute_coefficients();
    assert!(a.abs() < 1e-15 && b.abs() < 1e-15 && (v - 10.0).abs() < 1e-15 && p.abs() < 1e-15);
    let k = CubicTraj::new(1.0, -2.0, 3.0, 4.0, 0.0, 5.0).eval(2.0);
    assert_eq!((k.p, k.v, k.u), (10.0, 7.0, 8.0));
    assert!(solve_boundary_coefficients(2.0, 8.0, 2.0 + 1e-9, 0.0, 100.0).is_err());
    let cruise = CubicTraj::new(0.0, 0.0, 10.0, 0.0, 0.0, 10.0);
    assert!((time_at_position(&cruise.into(), 70.0).unwrap() - 7.0).abs() < 1e-12);
}

#[test]
fn four_by_four_oracle() {
    // dense Gaussian elimination on the boundary system in absolute time
    let (t0, v0, tf, p0, pf): (f64, f64, f64, f64, f64) = (3.0, 5.0, 13.0, 0.0, 100.0);
    let mut m = [
        [t0.powi(3), t0 * t0, t0, 1.0, p0],
        [3.0 * t0 * t0, 2.0 * t0, 1.0, 0.0, v0],
        [tf.powi(3), tf * tf, tf, 1.0, pf],
        [6.0 * tf, 2.0, 0.0, 0.0, 0.0],
    ];
    for col in 0..4 {
        let piv = (col..4).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for k in col..5 {
                    m[r][k] -= f * m[col][k];
                }
            }
        }
    }
    let oracle: Vec<f64> = (0..4).map(|i| m[i][4] / m[i][i]).collect();
    let got = solve_boundary_coefficients(t0, v0, tf, p0, pf).unwrap().absolute_coefficients();
    for (g, o) in got.iter().zip(&oracle) {
        assert!((g - o).abs() < 1e-10, "{got:?} vs {oracle:?}");
    }
}

#[test]
fn degenerate_discriminant_uses_fallback() {
    let c = CubicTraj::new(-0.05, 1.5, 0.5, 0.0, 0.0, 8.0);
    let p = c.position(3.0);
    let (t, path) = invert_position(&c.into(), p).unwrap();
    assert_ne!(path, cav_merge::polytraj::InversionPath::Cardano);
    assert!((t - 3.0).abs() < 1e-6);
}

fn cav_forecast(id: u64, road: Road, traj: Trajectory, t_merge: f64) -> Forecast {
    Forecast {
        id: VehicleId(id),
        road,
        motion: Motion::Planned(traj),
        recent: TrajHistory::new(4),
        now: 0.0,
        merge: GaussianPred::new(t_merge, 0.0),
        exit_time: traj.window().1,
        release: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_is_the_earliest_passing_exit(
        v in 10.0..25.0f64,
        other_merge in 10.0..30.0f64,
        lead_gap in 1.5..6.0f64,
        lead_speed in 8.0..25.0f64,
    ) {
        let params = PlannerParams::default();
        let ego = EgoState { t: 0.0, p: -350.0, v, merged_at: None };
        let lead = AffineTraj::new(lead_speed, -350.0 + lead_speed * lead_gap, -50.0, 200.0).unwrap();
        let other = AffineTraj::new(15.0, -15.0 * other_merge, -50.0, 200.0).unwrap();
        let snap = NeighborSnapshot {
            predecessor: Some(cav_forecast(1, Road::A, lead.into(), lead.time_at(0.0))),
            neighbors: vec![cav_forecast(2, Road::B, other.into(), other_merge)],
        };
        let Ok(p) = plan(&ego, &snap, &params, PlanMode::Stochastic, 0.0, 80.0) else {
            return Ok(());
        };
        prop_assert!(check_kinematic(&p.traj, &params, (0.0, p.t_exit)));
        prop_assert!((p.t_merge - other_merge).abs() >= params.delta_l - 1e-6);
        let window = feasible_time_range(-350.0, v, 80.0, 0.0, &params.limits());
        let mut t = window.t_lower;
        while t < p.t_exit - 1e-6 {
            let c = solve_boundary_coefficients(0.0, v, t, -350.0, 80.0).unwrap();
            prop_assert_ne!(certify(&c, &ego, &snap, &params, PlanMode::Stochastic, 0.0), Verdict::Pass);
            t += params.dt_step;
        }
    }
}

#[test]
fn lone_vehicle_takes_the_earliest_exit() {
    let params = PlannerParams::default();
    let ego = EgoState { t: 5.0, p: -350.0, v: 30.0, merged_at: None };
    let p = plan(&ego, &NeighborSnapshot::default(), &params, PlanMode::Stochastic, 0.0, 80.0).unwrap();
    assert!((p.t_exit - (5.0 + 430.0 / 30.0)).abs() < 1e-9);
    assert!(!p.extended);
}
