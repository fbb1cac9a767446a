//! Inverse error function and standard-normal quantile.

use std::f64::consts::PI;

/// `erf^{-1}(y)` for `y` in `(-1, 1)`; returns `±inf` at the endpoints and
/// NaN outside.
///
/// A single-precision rational guess (Giles, 2010) is refined by Newton
/// steps on `erf`, switching to `erfc` in the tails to avoid cancellation.
pub fn erf_inv(y: f64) -> f64 {
    if y.is_nan() || !(-1.0..=1.0).contains(&y) {
        return f64::NAN;
    }
    if y == 1.0 {
        return f64::INFINITY;
    }
    if y == -1.0 {
        return f64::NEG_INFINITY;
    }
    if y == 0.0 {
        return 0.0;
    }
    let mut x = initial_guess(y);
    let tail = y.abs() > 0.5;
    let two_over_sqrt_pi = 2.0 / PI.sqrt();
    for _ in 0..6 {
        let resid = if tail {
            // erf(x) - y == (1 - y) - erfc(x) for x > 0, mirrored for x < 0
            let s = y.signum();
            s * ((1.0 - s * y) - libm::erfc(s * x))
        } else {
            libm::erf(x) - y
        };
        let slope = two_over_sqrt_pi * (-x * x).exp();
        if slope == 0.0 {
            break;
        }
        // Halley correction uses erf'' = -2x erf'
        let newton = resid / slope;
        let step = newton / (1.0 + x * newton);
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1e-300) {
            break;
        }
    }
    x
}

fn initial_guess(y: f64) -> f64 {
    let mut w = -((1.0 - y) * (1.0 + y)).ln();
    let p = if w < 5.0 {
        w -= 2.5;
        let mut p = 2.810_226_36e-08;
        for c in [
            3.432_739_39e-07,
            -3.523_387_7e-06,
            -4.391_506_54e-06,
            0.000_218_580_87,
            -0.001_253_725_03,
            -0.004_177_681_64,
            0.246_640_727,
            1.501_409_41,
        ] {
            p = c + p * w;
        }
        p
    } else {
        w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        for c in [
            0.000_100_950_558,
            0.001_349_343_22,
            -0.003_673_428_44,
            0.005_739_507_73,
            -0.007_622_461_3,
            0.009_438_870_47,
            1.001_674_06,
            2.832_976_82,
        ] {
            p = c + p * w;
        }
        p
    };
    p * y
}

/// Quantile of the standard normal distribution: `sqrt(2) erf^{-1}(2 xi - 1)`.
pub fn normal_quantile(xi: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf_inv(2.0 * xi - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverts_erf_across_range() {
        for i in 1..2000 {
            let y = -1.0 + i as f64 / 1000.0;
            let x = erf_inv(y);
            assert!((libm::erf(x) - y).abs() < 1e-14, "y={y}");
        }
        for y in [1.0 - 1e-12, -1.0 + 1e-10, 1e-300, -1e-20] {
            let x = erf_inv(y);
            let back = libm::erf(x);
            assert!(((back - y) / y.abs().max(1e-300)).abs() < 1e-3 || (back - y).abs() < 1e-15);
        }
    }

    #[test]
    fn endpoints() {
        assert_eq!(erf_inv(1.0), f64::INFINITY);
        assert_eq!(erf_inv(-1.0), f64::NEG_INFINITY);
        assert!(erf_inv(1.5).is_nan());
        assert_eq!(erf_inv(0.0), 0.0);
    }

    #[test]
    fn known_quantiles() {
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(0.95) - 1.644_853_626_951_472_2).abs() < 1e-12);
        assert!((normal_quantile(0.9) - 1.281_551_565_544_600_5).abs() < 1e-12);
        assert_eq!(normal_quantile(0.5), 0.0);
    }
}
