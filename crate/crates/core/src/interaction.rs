//! Relative-state kinematics shared by the planner and the simulator.

use serde::{Deserialize, Serialize};

use crate::grid::DIMS;
use crate::Role;

/// Absolute point-mass state in the road frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, vx, vy }
    }
}

/// MDP state seen by one role. Positions and velocities are always
/// `LCV - LKV`; `v_intention` is the observer's own speed minus its target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelativeState {
    pub x_rel: f64,
    pub y_rel: f64,
    pub vx_rel: f64,
    pub vy_rel: f64,
    pub v_intention: f64,
}

impl RelativeState {
    pub fn new(x_rel: f64, y_rel: f64, vx_rel: f64, vy_rel: f64, v_intention: f64) -> Self {
        Self {
            x_rel,
            y_rel,
            vx_rel,
            vy_rel,
            v_intention,
        }
    }

    pub fn to_array(self) -> [f64; DIMS] {
        [
            self.x_rel,
            self.y_rel,
            self.vx_rel,
            self.vy_rel,
            self.v_intention,
        ]
    }

    pub fn from_array(a: [f64; DIMS]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }
}

/// Accelerations commanded by both vehicles over one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionPair {
    pub a_lkv_x: f64,
    pub a_lcv_x: f64,
    pub a_lcv_y: f64,
}

impl ActionPair {
    pub fn new(a_lkv_x: f64, a_lcv_x: f64, a_lcv_y: f64) -> Self {
        Self {
            a_lkv_x,
            a_lcv_x,
            a_lcv_y,
        }
    }

    /// Assemble from a role's own `(ax, ay)` and its opponent's.
    pub fn from_role(role: Role, own: (f64, f64), opponent: (f64, f64)) -> Self {
        match role {
            Role::Lkv => Self::new(own.0, opponent.0, opponent.1),
            Role::Lcv => Self::new(opponent.0, own.0, own.1),
        }
    }
}

pub fn relative_state(lkv: &VehicleState, lcv: &VehicleState, own_vx: f64, v0: f64) -> RelativeState {
    RelativeState {
        x_rel: lcv.x - lkv.x,
        y_rel: lcv.y - lkv.y,
        vx_rel: lcv.vx - lkv.vx,
        vy_rel: lcv.vy - lkv.vy,
        v_intention: own_vx - v0,
    }
}

/// Relative state from `role`'s point of view.
pub fn observe(role: Role, lkv: &VehicleState, lcv: &VehicleState, v0: f64) -> RelativeState {
    let own_vx = match role {
        Role::Lkv => lkv.vx,
        Role::Lcv => lcv.vx,
    };
    relative_state(lkv, lcv, own_vx, v0)
}

/// One MDP transition. `own` and `opponent` are `(ax, ay)` pairs; the LKV's
/// lateral component is ignored.
#[inline]
pub fn step_mdp(
    s: &RelativeState,
    own: (f64, f64),
    opponent: (f64, f64),
    role: Role,
    dt: f64,
) -> RelativeState {
    let a = ActionPair::from_role(role, own, opponent);
    step_mdp_pair(s, &a, own.0, dt)
}

#[inline]
pub(crate) fn step_mdp_pair(s: &RelativeState, a: &ActionPair, own_ax: f64, dt: f64) -> RelativeState {
    RelativeState {
        x_rel: s.x_rel + s.vx_rel * dt,
        y_rel: s.y_rel + s.vy_rel * dt,
        vx_rel: s.vx_rel + (a.a_lcv_x - a.a_lkv_x) * dt,
        vy_rel: s.vy_rel + a.a_lcv_y * dt,
        v_intention: s.v_intention + own_ax * dt,
    }
}

/// Advance both vehicles by `dt`: positions with the current velocity, then
/// velocities with the commanded acceleration. Longitudinal speed is floored
/// at zero and the LKV never moves laterally.
pub fn step_world(
    lkv: &VehicleState,
    lcv: &VehicleState,
    actions: &ActionPair,
    dt: f64,
) -> (VehicleState, VehicleState) {
    let next_lkv = VehicleState {
        x: lkv.x + lkv.vx * dt,
        y: lkv.y,
        vx: (lkv.vx + actions.a_lkv_x * dt).max(0.0),
        vy: 0.0,
    };
    let next_lcv = VehicleState {
        x: lcv.x + lcv.vx * dt,
        y: lcv.y + lcv.vy * dt,
        vx: (lcv.vx + actions.a_lcv_x * dt).max(0.0),
        vy: lcv.vy + actions.a_lcv_y * dt,
    };
    (next_lkv, next_lcv)
}
