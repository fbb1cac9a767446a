//! Fixed-step microscopic simulation of the two-road merge.

mod audit;
mod driver;
mod geometry;
mod metrics;
mod spawn;
mod world;

use serde::{Deserialize, Serialize};

pub use audit::{AuditFailure, AuditKind};
pub use driver::{hdv_driver_step, DriftSegment, DriverGains, HdvDriver, HdvDriverParams, LeaderCue};
pub use geometry::ScenarioGeometry;
pub use metrics::{metrics, CohortStats, Metrics, VehicleRecord};
pub use spawn::{ArrivalStream, ScriptedArrival, SpawnRequest};
pub use world::{
    crossing_time, AccParams, CavState, Event, HdvModel, HdvState, Kind, Phase, PlanReason, SimError, SimParams,
    Vehicle, WorldState,
};

/// Spawn serial number; stable for the life of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u64);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Road {
    A,
    B,
}

impl Road {
    pub fn other(self) -> Road {
        match self {
            Road::A => Road::B,
            Road::B => Road::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Road::A => 0,
            Road::B => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Cav,
    Hdv,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Cav => "cav",
            Role::Hdv => "hdv",
        }
    }
}
