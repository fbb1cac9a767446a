use serde::{Deserialize, Serialize};

use super::world::{Event, WorldState};
use super::{Road, Role, VehicleId};

/// One vehicle that completed the control zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: VehicleId,
    pub role: Role,
    pub road: Road,
    pub t_entry: f64,
    pub t_merge: Option<f64>,
    pub t_exit: f64,
}

impl VehicleRecord {
    pub fn travel_time(&self) -> f64 {
        self.t_exit - self.t_entry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CohortStats {
    pub count: usize,
    pub avg_travel_time: Option<f64>,
}

impl CohortStats {
    fn of<'a>(records: impl Iterator<Item = &'a VehicleRecord>) -> Self {
        let (n, sum) = records.fold((0usize, 0.0), |(n, s), r| (n + 1, s + r.travel_time()));
        CohortStats { count: n, avg_travel_time: (n > 0).then(|| sum / n as f64) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub window_start: f64,
    pub window_end: f64,
    pub spawned: u64,
    pub all: CohortStats,
    pub cav: CohortStats,
    pub hdv: CohortStats,
    pub replan_event_count: usize,
    pub replanned_cav_count: usize,
    pub plan_commit_count: usize,
    pub infeasible_plan_count: usize,
    pub extended_plan_count: usize,
    pub audit_failure_count: usize,
    pub queued_at_end: usize,
}

/// Travel-time statistics over vehicles that exited within
/// `[window_start, window_end]`.
pub fn metrics(world: &WorldState, window_start: f64, window_end: f64) -> Metrics {
    let measured: Vec<_> =
        world.records.iter().filter(|r| r.t_exit >= window_start && r.t_exit <= window_end).collect();
    let mut m = Metrics {
        window_start,
        window_end,
        spawned: world.spawned,
        all: CohortStats::of(measured.iter().copied()),
        cav: CohortStats::of(measured.iter().copied().filter(|r| r.role == Role::Cav)),
        hdv: CohortStats::of(measured.iter().copied().filter(|r| r.role == Role::Hdv)),
        replan_event_count: 0,
        replanned_cav_count: 0,
        plan_commit_count: 0,
        infeasible_plan_count: 0,
        extended_plan_count: 0,
        audit_failure_count: world.audit_failures.len(),
        queued_at_end: world.queued(),
    };
    for e in &world.events {
        match e {
            Event::Replan(r) => {
                m.replan_event_count += 1;
                m.replanned_cav_count += r.replanned_cavs.len();
            }
            Event::PlanCommit { extended, .. } => {
                m.plan_commit_count += 1;
                m.extended_plan_count += usize::from(*extended);
            }
            Event::PlanInfeasible { .. } => m.infeasible_plan_count += 1,
            _ => {}
        }
    }
    m
}
