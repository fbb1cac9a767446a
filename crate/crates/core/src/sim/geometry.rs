use serde::{Deserialize, Serialize};

use crate::humanmodel::FeatureScale;

/// Positions along each road, shared past the merge point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioGeometry {
    /// Control-zone entry.
    pub p0: f64,
    pub p_merge: f64,
    /// Control-zone exit.
    pub p_exit: f64,
    pub buffer_len: f64,
    pub proj_len: f64,
    /// Distance past the exit before a vehicle leaves the road entirely.
    pub tail_len: f64,
}

impl Default for ScenarioGeometry {
    fn default() -> Self {
        Self { p0: -350.0, p_merge: 0.0, p_exit: 80.0, buffer_len: 70.0, proj_len: 100.0, tail_len: 150.0 }
    }
}

impl ScenarioGeometry {
    pub fn spawn_position(&self) -> f64 {
        self.p0 - self.buffer_len
    }

    pub fn in_zone(&self, p: f64) -> bool {
        p >= self.p0 && p < self.p_exit
    }

    pub fn feature_scale(&self) -> FeatureScale {
        FeatureScale { p_start: self.p0, p_end: self.p_exit }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.p0 < self.p_merge && self.p_merge < self.p_exit) {
            return Err(format!(
                "need p0 < p_merge < p_exit, got {} / {} / {}",
                self.p0, self.p_merge, self.p_exit
            ));
        }
        if !(self.buffer_len > 0.0) {
            return Err(format!("buffer_len must be positive, got {}", self.buffer_len));
        }
        if !(self.proj_len >= 0.0 && self.proj_len <= self.p_merge - self.p0) {
            return Err(format!("proj_len must lie in [0, p_merge - p0], got {}", self.proj_len));
        }
        if !(self.tail_len >= 0.0) {
            return Err(format!("tail_len must be non-negative, got {}", self.tail_len));
        }
        Ok(())
    }
}
