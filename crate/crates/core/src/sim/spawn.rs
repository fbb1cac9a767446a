//! Seeded Poisson arrivals, one stream per road.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{Road, Role};

/// A vehicle waiting to be placed at the start of the buffer zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnRequest {
    pub t_request: f64,
    pub road: Road,
    pub role: Role,
    pub speed: f64,
    /// Only meaningful for HDVs.
    pub desired_tau: f64,
}

/// Hand-placed arrival from a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedArrival {
    pub time: f64,
    pub road: Road,
    pub role: Role,
    pub speed: f64,
    #[serde(default = "default_tau")]
    pub desired_tau: f64,
}

fn default_tau() -> f64 {
    1.5
}

impl From<ScriptedArrival> for SpawnRequest {
    fn from(a: ScriptedArrival) -> Self {
        SpawnRequest { t_request: a.time, road: a.road, role: a.role, speed: a.speed, desired_tau: a.desired_tau }
    }
}

#[derive(Debug, Clone)]
pub struct ArrivalStream {
    road: Road,
    gap: Option<Exp<f64>>,
    penetration: f64,
    speed_range: (f64, f64),
    tau_range: (f64, f64),
    rng: ChaCha8Rng,
    next_time: f64,
}

impl ArrivalStream {
    /// `volume` is vehicles per hour on this road alone.
    pub fn new(
        road: Road,
        volume: f64,
        penetration: f64,
        speed_range: (f64, f64),
        tau_range: (f64, f64),
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + road.index() as u64);
        let gap = (volume > 0.0).then(|| Exp::new(volume / 3600.0).expect("positive rate"));
        let mut s = Self { road, gap, penetration, speed_range, tau_range, rng, next_time: f64::INFINITY };
        s.next_time = s.draw_gap();
        s
    }

    fn draw_gap(&mut self) -> f64 {
        match &self.gap {
            Some(d) => d.sample(&mut self.rng),
            None => f64::INFINITY,
        }
    }

    fn uniform(&mut self, (lo, hi): (f64, f64)) -> f64 {
        if hi > lo {
            self.rng.random_range(lo..hi)
        } else {
            lo
        }
    }

    /// Every arrival due at or before `t`.
    pub fn poll(&mut self, t: f64) -> Vec<SpawnRequest> {
        let mut out = Vec::new();
        while self.next_time <= t {
            let is_cav = self.rng.random::<f64>() < self.penetration;
            let speed = self.uniform(self.speed_range);
            let desired_tau = self.uniform(self.tau_range);
            out.push(SpawnRequest {
                t_request: self.next_time,
                road: self.road,
                role: if is_cav { Role::Cav } else { Role::Hdv },
                speed,
                desired_tau,
            });
            self.next_time += self.draw_gap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(volume: f64, penetration: f64, seed: u64) -> ArrivalStream {
        ArrivalStream::new(Road::A, volume, penetration, (10.0, 25.0), (1.2, 2.0), seed)
    }

    #[test]
    fn mean_headway_matches_volume() {
        let mut s = stream(1200.0, 0.5, 11);
        let mut times = Vec::new();
        let mut t = 0.0;
        while times.len() < 10_000 {
            t += 10.0;
            times.extend(s.poll(t).into_iter().map(|r| r.t_request));
        }
        times.truncate(10_000);
        let mean = times.last().unwrap() / times.len() as f64;
        assert!((mean - 3.0).abs() < 0.15, "{mean}");
    }

    #[test]
    fn penetration_extremes() {
        let mut all_hdv = stream(1200.0, 0.0, 1);
        assert!(all_hdv.poll(3600.0).iter().all(|r| r.role == Role::Hdv));
        let mut all_cav = stream(1200.0, 1.0, 1);
        assert!(all_cav.poll(3600.0).iter().all(|r| r.role == Role::Cav));
    }

    #[test]
    fn seeded_and_in_range() {
        let a = stream(800.0, 0.4, 5).poll(600.0);
        let b = stream(800.0, 0.4, 5).poll(600.0);
        assert_eq!(a, b);
        assert!(a.iter().all(|r| (10.0..25.0).contains(&r.speed) && (1.2..2.0).contains(&r.desired_tau)));
        assert!(stream(0.0, 0.4, 5).poll(1e6).is_empty());
    }
}
