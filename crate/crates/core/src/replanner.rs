//! Detection of stale HDV predictions and selective CAV replanning.
//!
//! Every step, each in-zone HDV's observed time shift is compared with the
//! confidence interval of its last stored prediction. Any miss retrains that
//! HDV and every later-indexed one, then the CAVs exposed to the
//! earliest-merging offender replan from their current state.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::blr::confidence_interval;
use crate::humanmodel::{observe_time_shift, LeaderRef, TimeShiftDist};
use crate::planner::Verdict;
use crate::sim::{Event, PlanReason, Role, VehicleId, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauUpdate {
    pub id: VehicleId,
    pub old: Option<TimeShiftDist>,
    pub new: TimeShiftDist,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplanEvent {
    pub t_c: f64,
    pub violating_hdvs: BTreeSet<VehicleId>,
    /// Violator with the earliest predicted merge; drives the replan set.
    pub trigger: VehicleId,
    pub replanned_cavs: BTreeSet<VehicleId>,
    /// Members of the replan set whose new plan was infeasible; they fall back
    /// to gap keeping until a plan is found again.
    pub failed_cavs: BTreeSet<VehicleId>,
    pub tau_updates: Vec<TauUpdate>,
}

/// Result of checking one HDV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Detection {
    Inside(f64),
    Outside(f64),
    /// The time shift could not be observed against the model's leader.
    Unobservable,
    /// The leader assignment changed since the model was trained.
    LeaderChanged,
}

impl Detection {
    pub fn violates(&self) -> bool {
        !matches!(self, Detection::Inside(_))
    }
}

pub fn detect_one(world: &WorldState, k: VehicleId, zeta: f64, t_c: f64) -> Option<Detection> {
    let veh = world.vehicle(k)?;
    let model = world.hdv_model(k)?;
    let current = world.leaders.get(&k).map_or(LeaderRef::Virtual, |a| a.leader);
    if current != model.assigned {
        return Some(Detection::LeaderChanged);
    }
    let w = world.params.w;
    let obs = match (model.virtual_traj, model.source_vehicle()) {
        (Some(vl), _) => observe_time_shift(&veh.history, &vl, w, t_c),
        (None, Some(j)) => match world.vehicle(j) {
            Some(l) => observe_time_shift(&veh.history, &l.history, w, t_c),
            None => return Some(Detection::Unobservable),
        },
        (None, None) => return Some(Detection::Unobservable),
    };
    let Ok(tau_hat) = obs else {
        return Some(Detection::Unobservable);
    };
    let (lo, hi) = confidence_interval(&model.tau.as_pred(), zeta);
    Some(if tau_hat >= lo && tau_hat <= hi { Detection::Inside(tau_hat) } else { Detection::Outside(tau_hat) })
}

/// In-zone HDVs whose observed time shift left its confidence interval.
///
/// HDVs that entered during the current step are skipped; they are trained
/// rather than checked.
pub fn detect(world: &WorldState, zeta: f64, t_c: f64) -> BTreeSet<VehicleId> {
    world
        .in_zone(Role::Hdv)
        .into_iter()
        .filter(|k| !world.entered_now.contains(k))
        .filter(|&k| detect_one(world, k, zeta, t_c).is_some_and(|d| d.violates()))
        .collect()
}

fn predicted_merge(world: &WorldState, k: VehicleId) -> f64 {
    let veh = world.vehicle(k);
    veh.and_then(|v| v.t_merge)
        .or_else(|| veh.and_then(|v| v.hdv()).and_then(|h| h.prediction.as_ref()).map(|p| p.merge_time.mu))
        .unwrap_or(f64::INFINITY)
}

/// The violator with the earliest predicted merge.
pub fn trigger_of(violators: &BTreeSet<VehicleId>, world: &WorldState) -> Option<VehicleId> {
    violators.iter().copied().min_by(|a, b| predicted_merge(world, *a).total_cmp(&predicted_merge(world, *b)))
}

/// CAVs behind the trigger on its road, plus CAVs on the other road planned
/// to merge later than the trigger's mean merge minus the lateral gap.
pub fn replan_set(violators: &BTreeSet<VehicleId>, world: &WorldState) -> BTreeSet<VehicleId> {
    let Some(j) = trigger_of(violators, world) else {
        return BTreeSet::new();
    };
    let Some(jv) = world.vehicle(j) else {
        return BTreeSet::new();
    };
    let mu_j = predicted_merge(world, j);
    let t0_j = jv.t_entry.unwrap_or(f64::NEG_INFINITY);
    let delta_l = world.params.planner.delta_l;
    world
        .in_zone(Role::Cav)
        .into_iter()
        .filter(|&i| {
            let Some(iv) = world.vehicle(i) else { return false };
            if iv.road == jv.road {
                iv.t_entry.is_some_and(|t0| t0 > t0_j)
            } else {
                iv.plan().is_some_and(|pl| pl.t_merge > mu_j - delta_l)
            }
        })
        .collect()
}

/// One pass of the coordinator at `t_c`.
pub fn step(world: &mut WorldState, t_c: f64) -> Option<ReplanEvent> {
    world.update_leaders();
    let zeta = world.params.zeta;
    let replanning = world.params.replanning;

    let mut replan = false;
    let mut violators = BTreeSet::new();
    let mut updates = Vec::new();
    let mut entered_hdvs = Vec::new();
    for k in world.in_zone(Role::Hdv) {
        if world.entered_now.contains(&k) {
            world.train_hdv(k, t_c);
            entered_hdvs.push(k);
            continue;
        }
        if !replanning {
            continue;
        }
        let violates = detect_one(world, k, zeta, t_c).is_some_and(|d| d.violates());
        if violates {
            violators.insert(k);
        }
        if violates || replan {
            if let Some((old, new)) = world.train_hdv(k, t_c) {
                updates.push(TauUpdate { id: k, old, new });
            }
            replan = true;
        }
    }
    world.refresh_predictions();

    let targets = if replan { replan_set(&violators, world) } else { BTreeSet::new() };
    let mut replanned = BTreeSet::new();
    let mut failed = BTreeSet::new();
    let mut committed = false;
    for i in world.in_zone(Role::Cav) {
        let entering = world.entered_now.contains(&i);
        let reason = if entering {
            PlanReason::Entry
        } else if targets.contains(&i) {
            PlanReason::Replan
        } else if world
            .vehicle(i)
            .and_then(|v| v.cav())
            .is_some_and(|c| c.plan.is_none() && c.retry_at.is_none_or(|r| r <= t_c + 1e-9))
        {
            PlanReason::Retry
        } else {
            continue;
        };
        match world.plan_cav(i, reason) {
            Ok(_) => {
                if reason == PlanReason::Replan {
                    replanned.insert(i);
                }
                committed = true;
                world.refresh_predictions();
            }
            Err(_) if reason == PlanReason::Replan => {
                world.drop_plan(i);
                failed.insert(i);
            }
            Err(_) => {}
        }
    }

    certify_committed(world, t_c, replanning, entered_hdvs, committed);

    if !replan {
        return None;
    }
    let event = ReplanEvent {
        t_c,
        trigger: trigger_of(&violators, world).expect("replan implies a violator"),
        violating_hdvs: violators,
        replanned_cavs: replanned,
        failed_cavs: failed,
        tau_updates: updates,
    };
    world.push_event(Event::Replan(event.clone()));
    Some(event)
}

/// Re-checks committed CAV plans and replans the ones that no longer pass.
///
/// Plans are checked against freshly entered HDVs when replanning is on,
/// after any other CAV committed a new plan this step, and always when a
/// constraint partner is only forecast at constant speed, since such a
/// partner (a CAV without a plan, say) may slow down at any time.
fn certify_committed(
    world: &mut WorldState,
    t_c: f64,
    replanning: bool,
    entered_hdvs: Vec<VehicleId>,
    committed: bool,
) {
    let after_entry = (replanning && !entered_hdvs.is_empty()) || committed;
    let mut replanned = Vec::new();
    let mut failed = Vec::new();
    for i in world.in_zone(Role::Cav) {
        if world.vehicle(i).and_then(|v| v.plan()).is_none() {
            continue;
        }
        if !after_entry && !world.has_unplanned_partner(i) {
            continue;
        }
        if world.certify_plan(i).is_none_or(|v| v == Verdict::Pass) {
            continue;
        }
        match world.plan_cav(i, PlanReason::Certify) {
            Ok(_) => {
                replanned.push(i);
                world.refresh_predictions();
            }
            Err(_) => {
                world.drop_plan(i);
                failed.push(i);
            }
        }
    }
    if !replanned.is_empty() || !failed.is_empty() {
        world.push_event(Event::Certification { t: t_c, entered_hdvs, replanned, failed });
    }
}
