use serde::{Deserialize, Serialize};

use super::{SimTrace, StepRecord};
use crate::error::{Error, Result};
use crate::interaction::VehicleState;

/// Lateral band around the target lane that counts as merged, m.
pub const LANE_CHANGE_BAND: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    /// m/s
    pub mean_velocity: f64,
    /// m/s^3
    pub jerk_min: f64,
    pub jerk_max: f64,
}

impl VehicleMetrics {
    pub fn max_abs_jerk(&self) -> f64 {
        self.jerk_min.abs().max(self.jerk_max.abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub seed: u64,
    pub collision_rate: f64,
    pub lkv: VehicleMetrics,
    pub lcv: VehicleMetrics,
    /// Mean centre-to-centre distance, m.
    pub mean_distance: f64,
    pub lane_change_completion_rate: f64,
    /// Episodes in which the IDM saw a closed gap.
    pub emergency_episodes: usize,
}

/// Start of the final stretch of the trace, ending with `last`, during which
/// the LCV stays within the merge band of the target lane.
pub fn lane_change_time(records: &[StepRecord], last: &VehicleState, target_y: f64, t_end: f64) -> Option<f64> {
    let inside = |y: f64| (y - target_y).abs() <= LANE_CHANGE_BAND;
    if !inside(last.y) {
        return None;
    }
    let mut t = t_end;
    for r in records.iter().rev() {
        if !inside(r.lcv.y) {
            break;
        }
        t = r.t;
    }
    Some(t)
}

/// Jerk samples of a command sequence sampled every `dt_plan`.
fn jerks(cmds: impl Iterator<Item = f64>, dt_plan: f64) -> Vec<f64> {
    let cmds: Vec<f64> = cmds.collect();
    cmds.windows(2).map(|w| (w[1] - w[0]) / dt_plan).collect()
}

/// Aggregate per-episode statistics. Velocities and distances are averaged
/// over steps within an episode, then over episodes; jerk extrema are taken
/// over all planning ticks of all episodes.
pub fn compute_metrics(traces: &[SimTrace], seed: u64) -> Result<MetricsReport> {
    let Some(first) = traces.first() else {
        return Err(Error::InvalidParam("no traces to aggregate".into()));
    };
    if traces.iter().any(|t| t.dt_plan != first.dt_plan || t.dt_sim != first.dt_sim) {
        return Err(Error::InvalidParam("traces must share dt_sim and dt_plan".into()));
    }
    let n = traces.len() as f64;
    let mut collisions = 0usize;
    let mut completed = 0usize;
    let mut emergency = 0usize;
    let (mut v_lkv, mut v_lcv, mut dist) = (0.0, 0.0, 0.0);
    let mut jk = (f64::INFINITY, f64::NEG_INFINITY);
    let mut jc = (f64::INFINITY, f64::NEG_INFINITY);
    for tr in traces {
        collisions += tr.collision as usize;
        completed += tr.lane_change_time.is_some() as usize;
        emergency += tr.emergency as usize;
        let m = tr.records.len().max(1) as f64;
        v_lkv += tr.records.iter().map(|r| r.lkv.vx).sum::<f64>() / m;
        v_lcv += tr.records.iter().map(|r| r.lcv.vx).sum::<f64>() / m;
        dist += tr
            .records
            .iter()
            .map(|r| (r.lcv.x - r.lkv.x).hypot(r.lcv.y - r.lkv.y))
            .sum::<f64>()
            / m;
        let cmds = tr.plan_commands();
        for j in jerks(cmds.iter().map(|c| c.0), tr.dt_plan) {
            jk = (jk.0.min(j), jk.1.max(j));
        }
        for j in jerks(cmds.iter().map(|c| c.1), tr.dt_plan) {
            jc = (jc.0.min(j), jc.1.max(j));
        }
    }
    let fix = |(lo, hi): (f64, f64)| if lo > hi { (0.0, 0.0) } else { (lo, hi) };
    let (jk, jc) = (fix(jk), fix(jc));
    Ok(MetricsReport {
        episodes: traces.len(),
        seed,
        collision_rate: collisions as f64 / n,
        lkv: VehicleMetrics {
            mean_velocity: v_lkv / n,
            jerk_min: jk.0,
            jerk_max: jk.1,
        },
        lcv: VehicleMetrics {
            mean_velocity: v_lcv / n,
            jerk_min: jc.0,
            jerk_max: jc.1,
        },
        mean_distance: dist / n,
        lane_change_completion_rate: completed as f64 / n,
        emergency_episodes: emergency,
    })
}
