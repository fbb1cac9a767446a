//! Post-step safety audit.
//!
//! Every CAV in the control zone must keep its time-shifted gap to the
//! vehicle physically ahead above half the standstill distance, and no
//! vehicle upstream of the exit may pass the one it was following.

use std::collections::BTreeMap;

use serde::Serialize;

use super::world::{Phase, WorldState};
use super::{Role, VehicleId};
use crate::humanmodel::PositionSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    ShiftedGap,
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditFailure {
    pub t: f64,
    pub kind: AuditKind,
    pub follower: VehicleId,
    pub leader: VehicleId,
    pub gap: f64,
}

/// Follower to physical leader, for every vehicle that has one.
pub fn physical_order(world: &WorldState) -> BTreeMap<VehicleId, VehicleId> {
    world
        .vehicles
        .keys()
        .filter_map(|&id| world.physical_leader(id).map(|l| (id, l.id)))
        .collect()
}

pub fn audit(world: &WorldState, order_before: &BTreeMap<VehicleId, VehicleId>) -> Vec<AuditFailure> {
    let t = world.clock;
    let pp = &world.params.planner;
    let mut out = Vec::new();
    for (&f, &l) in order_before {
        if let (Some(fv), Some(lv)) = (world.vehicles.get(&f), world.vehicles.get(&l)) {
            if fv.phase != Phase::Exited && fv.p >= lv.p {
                out.push(AuditFailure { t, kind: AuditKind::Overlap, follower: f, leader: l, gap: lv.p - fv.p });
            }
        }
    }
    for v in world.vehicles.values() {
        if v.role() != Role::Cav || v.phase != Phase::Zone {
            continue;
        }
        if let Some(l) = world.physical_leader(v.id) {
            let gap = l.history.position_at(t - pp.delta_r) - v.p;
            if gap < 0.5 * pp.d_min {
                out.push(AuditFailure { t, kind: AuditKind::ShiftedGap, follower: v.id, leader: l.id, gap });
            }
        }
    }
    out
}
