//! Reference controllers: the Intelligent Driver Model for the lane keeper
//! and a Stackelberg game controller with a lateral PI loop for the lane
//! changer.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::interaction::VehicleState;

/// Vehicle length used for bumper gaps, m.
pub const VEHICLE_LENGTH: f64 = 4.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    pub a_max: f64,
    /// Target speed, m/s. Overridden by the agent's own target in simulation.
    pub v0: f64,
    pub delta: f64,
    /// Minimum jam distance, m.
    pub s0: f64,
    /// Desired time headway, s.
    pub t_headway: f64,
    /// Comfortable deceleration, m/s^2.
    pub b: f64,
    /// Emergency braking clamp, m/s^2.
    pub b_hard: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            a_max: 1.5,
            v0: 11.0,
            delta: 4.0,
            s0: 2.0,
            t_headway: 1.5,
            b: 2.0,
            b_hard: 6.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a_max, self.v0, self.delta, self.s0, self.t_headway, self.b, self.b_hard];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParam("IDM parameters must be positive and finite".into()));
        }
        Ok(())
    }

    /// Desired gap `s*`, floored at `s0`.
    pub fn desired_gap(&self, vx: f64, dv: f64) -> f64 {
        let s = self.s0 + vx * self.t_headway + vx * dv / (2.0 * (self.a_max * self.b).sqrt());
        s.max(self.s0)
    }
}

/// IDM output. `emergency` is set when the gap is already closed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdmAccel {
    pub a: f64,
    pub emergency: bool,
}

/// IDM acceleration for speed `vx`, bumper gap `gap` (infinite on a free
/// road) and closing speed `dv = vx - v_leader`.
pub fn idm_accel(vx: f64, gap: f64, dv: f64, p: &IdmParams) -> IdmAccel {
    if gap <= 0.0 {
        return IdmAccel {
            a: -p.b_hard,
            emergency: true,
        };
    }
    let free = (vx.max(0.0) / p.v0).powf(p.delta);
    let inter = if gap.is_finite() {
        (p.desired_gap(vx, dv) / gap).powi(2)
    } else {
        0.0
    };
    IdmAccel {
        a: (p.a_max * (1.0 - free - inter)).clamp(-p.b_hard, p.a_max),
        emergency: false,
    }
}

/// Leader seen by an IDM follower `me`: the other vehicle once its centre
/// is within half a lane of `me` and it is ahead. Returns `(bumper gap,
/// closing speed)`; the gap is infinite on a free road.
pub fn idm_leader(me: &VehicleState, other: &VehicleState, lane_width: f64) -> (f64, f64) {
    let dx = other.x - me.x;
    if dx > 0.0 && (other.y - me.y).abs() < 0.5 * lane_width {
        (dx - VEHICLE_LENGTH, me.vx - other.vx)
    } else {
        (f64::INFINITY, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtParams {
    /// Aggressiveness in [0, 1].
    pub q: f64,
    pub beta_mu: f64,
    pub beta_sigma: f64,
    /// Time-headway threshold of the safety payoff, s.
    pub thw_min: f64,
    /// Gap threshold of the space payoff and of the merge commit, m.
    pub gap_min: f64,
    pub c_safety: f64,
    pub c_space: f64,
    /// Decay rate of the acceleration-change penalty, per m/s^2.
    pub c_smooth: f64,
    pub candidate_ax: Vec<f64>,
    /// Prediction horizon, s.
    pub horizon: f64,
    pub pi_kp: f64,
    pub pi_ki: f64,
    pub pi_kd_rate: f64,
    /// Anti-windup bound on the integrator, m s.
    pub pi_integ_max: f64,
    pub ay_max: f64,
}

impl Default for GtParams {
    fn default() -> Self {
        Self {
            q: 0.5,
            beta_mu: 0.5,
            beta_sigma: 0.15,
            thw_min: 1.0,
            gap_min: 8.0,
            c_safety: 1.0,
            c_space: 0.25,
            c_smooth: 0.5,
            candidate_ax: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            horizon: 2.0,
            pi_kp: 1.0,
            pi_ki: 0.02,
            pi_kd_rate: 1.5,
            pi_integ_max: 2.0,
            ay_max: 1.5,
        }
    }
}

impl GtParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::InvalidParam(format!("GT aggressiveness q must be in [0, 1], got {}", self.q)));
        }
        if !(self.beta_sigma > 0.0) || !self.beta_mu.is_finite() {
            return Err(Error::InvalidParam("GT beta_sigma must be positive".into()));
        }
        if self.candidate_ax.is_empty() || self.candidate_ax.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParam("GT candidate list must be non-empty and finite".into()));
        }
        let rest = [
            self.thw_min,
            self.gap_min,
            self.c_safety,
            self.c_space,
            self.c_smooth,
            self.horizon,
            self.pi_kp,
            self.pi_ki,
            self.pi_kd_rate,
            self.pi_integ_max,
            self.ay_max,
        ];
        if rest.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParam("GT constants must be finite and non-negative".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParam("GT horizon must be positive".into()));
        }
        Ok(())
    }

    /// Weight on the space payoff, a normal CDF of the aggressiveness.
    pub fn beta(&self) -> f64 {
        Normal::new(self.beta_mu, self.beta_sigma)
            .expect("validated sigma")
            .cdf(self.q)
    }
}

/// Predicted kinematics of one candidate, as seen by the deciding vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtContext {
    /// `x_me - x_other - length` at the horizon: positive when the decider
    /// is ahead with clearance, m.
    pub gap_pred: f64,
    /// Unsigned bumper clearance at the horizon, m.
    pub clearance: f64,
    /// Time headway of the rear vehicle at the horizon, s.
    pub thw_pred: f64,
}

pub fn u_safety(ctx: &GtContext, p: &GtParams) -> f64 {
    (p.c_safety * (ctx.thw_pred - p.thw_min)).tanh()
}

pub fn u_space(ctx: &GtContext, p: &GtParams) -> f64 {
    (p.c_space * (ctx.gap_pred - p.gap_min)).tanh()
}

pub fn smoothness(a_x: f64, prev_a: f64, p: &GtParams) -> f64 {
    (-p.c_smooth * (a_x - prev_a).abs()).exp()
}

/// Total payoff from its parts.
pub fn gt_total(f_w: f64, beta: f64, safety: f64, space: f64) -> f64 {
    f_w * ((1.0 - beta) * safety + beta * space + 1.0) - 1.0
}

pub fn gt_payoff(a_x: f64, ctx: &GtContext, prev_a: f64, p: &GtParams) -> f64 {
    gt_total(smoothness(a_x, prev_a, p), p.beta(), u_safety(ctx, p), u_space(ctx, p))
}

/// Constant-acceleration prediction with the speed floored at zero.
fn predict(v: &VehicleState, a: f64, h: f64) -> (f64, f64) {
    if a < 0.0 && v.vx + a * h < 0.0 {
        let t_stop = -v.vx / a;
        (v.x + v.vx * t_stop + 0.5 * a * t_stop * t_stop, 0.0)
    } else {
        (v.x + v.vx * h + 0.5 * a * h * h, v.vx + a * h)
    }
}

/// Context for `me` choosing `a_me` while `other` plays `a_other`.
pub fn gt_context(me: &VehicleState, a_me: f64, other: &VehicleState, a_other: f64, horizon: f64) -> GtContext {
    let (x_me, v_me) = predict(me, a_me, horizon);
    let (x_ot, v_ot) = predict(other, a_other, horizon);
    let dx = x_me - x_ot;
    let clearance = dx.abs() - VEHICLE_LENGTH;
    let rear_v = if dx >= 0.0 { v_ot } else { v_me };
    GtContext {
        gap_pred: dx - VEHICLE_LENGTH,
        clearance,
        thw_pred: clearance.max(0.0) / rear_v.max(0.1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtDecision {
    pub a_x: f64,
    pub follower_a_x: f64,
    pub payoff: f64,
    pub commit: bool,
}

/// Prefer larger payoff, then smaller `|a|`, then the smaller value, so the
/// result does not depend on candidate order.
fn better(a: f64, u: f64, best_a: f64, best_u: f64) -> bool {
    u > best_u || (u == best_u && (a.abs() < best_a.abs() || (a.abs() == best_a.abs() && a < best_a)))
}

/// Stackelberg decision with payoff matrices given explicitly:
/// `leader[i][j]` and `follower[i][j]` are the payoffs when the leader plays
/// candidate `i` and the follower candidate `j`. Returns `(i, j)`.
pub fn stackelberg(candidates: &[f64], leader: &[Vec<f64>], follower: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_u = f64::NEG_INFINITY;
    for i in 0..candidates.len() {
        let mut j_best = 0;
        for j in 1..candidates.len() {
            if better(candidates[j], follower[i][j], candidates[j_best], follower[i][j_best]) {
                j_best = j;
            }
        }
        let u = leader[i][j_best];
        if best_u == f64::NEG_INFINITY || better(candidates[i], u, candidates[best.0], best_u) {
            best = (i, j_best);
            best_u = u;
        }
    }
    best
}

/// Leader (lane changer) decision against a best-responding lane keeper
/// that is assumed to mirror the leader's payoff.
pub fn gt_decide(
    lcv: &VehicleState,
    lkv: &VehicleState,
    prev_a: f64,
    prev_a_opponent: f64,
    p: &GtParams,
) -> GtDecision {
    let cands = &p.candidate_ax;
    let n = cands.len();
    let mut leader = vec![vec![0.0; n]; n];
    let mut follower = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let ctx_l = gt_context(lcv, cands[i], lkv, cands[j], p.horizon);
            let ctx_f = gt_context(lkv, cands[j], lcv, cands[i], p.horizon);
            leader[i][j] = gt_payoff(cands[i], &ctx_l, prev_a, p);
            follower[i][j] = gt_payoff(cands[j], &ctx_f, prev_a_opponent, p);
        }
    }
    let (i, j) = stackelberg(cands, &leader, &follower);
    let ctx = gt_context(lcv, cands[i], lkv, cands[j], p.horizon);
    let payoff = leader[i][j];
    GtDecision {
        a_x: cands[i],
        follower_a_x: cands[j],
        payoff,
        commit: ctx.clearance >= p.gap_min && payoff > 0.0,
    }
}

/// Lateral PI with rate feedback. Returns `(a_y, updated integrator)`.
pub fn lateral_pi(y_err: f64, vy: f64, integ: f64, p: &GtParams, dt: f64) -> (f64, f64) {
    let integ = (integ + y_err * dt).clamp(-p.pi_integ_max, p.pi_integ_max);
    let a = p.pi_kp * y_err + p.pi_ki * integ - p.pi_kd_rate * vy;
    (a.clamp(-p.ay_max, p.ay_max), integ)
}
