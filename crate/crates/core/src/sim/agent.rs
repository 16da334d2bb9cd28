use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{gt_decide, idm_accel, idm_leader, lateral_pi, GtParams, IdmParams};
use crate::error::{Error, Result};
use crate::interaction::{RelativeState, VehicleState};
use crate::sdp::Policy;
use super::metrics::LANE_CHANGE_BAND;
use crate::Role;

/// Piece of a scripted acceleration profile, active from `t` until the
/// next segment starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptSegment {
    pub t: f64,
    pub ax: f64,
    #[serde(default)]
    pub ay: f64,
}

/// Open-loop longitudinal profile. An LCV with `merge_at` set steers into
/// the target lane from that time on with the lateral PI of the GT
/// baseline; otherwise `ay` comes from the segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedProfile {
    pub segments: Vec<ScriptSegment>,
    #[serde(default)]
    pub merge_at: Option<f64>,
}

impl ScriptedProfile {
    pub fn zero() -> Self {
        Self {
            segments: vec![],
            merge_at: None,
        }
    }

    fn seg(t: f64, ax: f64) -> ScriptSegment {
        ScriptSegment { t, ax, ay: 0.0 }
    }

    /// Named profiles: `zero`, `lcv-conservative` (brake, merge behind,
    /// recover), `lcv-aggressive` (speed up, merge ahead, recover), and the
    /// lane-keeper variants `lkv-conservative` and `lkv-aggressive`.
    pub fn preset(name: &str) -> Result<Self> {
        let s = Self::seg;
        Ok(match name {
            "zero" => Self::zero(),
            "lcv-conservative" => Self {
                segments: vec![s(0.0, -1.5), s(2.5, 0.0), s(7.0, 1.5), s(9.5, 0.0)],
                merge_at: Some(3.0),
            },
            "lcv-aggressive" => Self {
                segments: vec![s(0.0, 1.5), s(2.5, 0.0), s(7.0, -1.5), s(9.5, 0.0)],
                merge_at: Some(1.5),
            },
            "lkv-conservative" => Self {
                segments: vec![s(0.0, -1.5), s(2.5, 0.0), s(7.0, 1.5), s(9.5, 0.0)],
                merge_at: None,
            },
            "lkv-aggressive" => Self {
                segments: vec![s(0.0, 1.5), s(2.5, 0.0), s(7.0, -1.5), s(9.5, 0.0)],
                merge_at: None,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown scripted profile `{other}` (expected zero, lcv-conservative, lcv-aggressive, \
                     lkv-conservative or lkv-aggressive)"
                )))
            }
        })
    }

    /// Segment active at time `t`.
    pub fn at(&self, t: f64) -> (f64, f64) {
        self.segments
            .iter()
            .rev()
            .find(|s| s.t <= t + 1e-9)
            .map_or((0.0, 0.0), |s| (s.ax, s.ay))
    }
}

/// Serializable controller choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ControllerSpec {
    Sdp { policy: PathBuf },
    Idm(IdmParams),
    Gt(GtParams),
    Human,
    Scripted(ScriptedProfile),
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerSpec::Sdp { .. } => "sdp",
            ControllerSpec::Idm(_) => "idm",
            ControllerSpec::Gt(_) => "gt",
            ControllerSpec::Human => "human",
            ControllerSpec::Scripted(_) => "scripted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub role: Role,
    pub controller: ControllerSpec,
    /// Target speed, m/s.
    pub v0: f64,
}

impl AgentConfig {
    /// Load policy files and check role compatibility.
    pub fn build(&self) -> Result<Agent> {
        let controller = match &self.controller {
            ControllerSpec::Sdp { policy } => Controller::Sdp(Arc::new(Policy::load(policy).map_err(|e| {
                Error::Config(format!("cannot load policy {}: {e}", policy.display()))
            })?)),
            ControllerSpec::Idm(p) => Controller::Idm(*p),
            ControllerSpec::Gt(p) => Controller::Gt(p.clone()),
            ControllerSpec::Human => Controller::External,
            ControllerSpec::Scripted(p) => Controller::Scripted(p.clone()),
        };
        Agent::new(self.role, controller, self.v0)
    }
}

/// Runtime controller.
#[derive(Clone, Debug)]
pub enum Controller {
    Sdp(Arc<Policy>),
    Idm(IdmParams),
    /// Stackelberg longitudinal game until merged, then IDM car following
    /// toward `v0`.
    Gt(GtParams),
    Scripted(ScriptedProfile),
    /// Commands recorded at each planning tick, held afterwards at zero.
    Replay(Arc<Vec<(f64, f64)>>),
    /// Commands supplied by the caller each planning tick.
    External,
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Sdp(_) => "sdp",
            Controller::Idm(_) => "idm",
            Controller::Gt(_) => "gt",
            Controller::Scripted(_) => "scripted",
            Controller::Replay(_) => "replay",
            Controller::External => "human",
        }
    }
}

#[derive(Clone, Debug, Default)]
struct AgentMemory {
    prev_ax: f64,
    committed: bool,
    merged: bool,
    integ: f64,
}

pub(super) struct DecisionContext {
    pub t: f64,
    pub plan_index: usize,
    pub dt_plan: f64,
    pub lane_width: f64,
    pub target_lane_y: f64,
}

pub(super) struct Command {
    pub ax: f64,
    pub ay: f64,
    pub emergency: bool,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub role: Role,
    pub controller: Controller,
    pub v0: f64,
    /// Lane the agent starts in; set when an episode begins.
    home_y: Option<f64>,
    memory: AgentMemory,
}

impl Agent {
    pub fn new(role: Role, controller: Controller, v0: f64) -> Result<Self> {
        if !(v0.is_finite() && v0 >= 0.0) {
            return Err(Error::InvalidParam(format!("target speed must be finite and non-negative, got {v0}")));
        }
        match (&controller, role) {
            (Controller::Idm(p), Role::Lkv) => p.validate()?,
            (Controller::Gt(p), Role::Lcv) => p.validate()?,
            (Controller::Idm(_), Role::Lcv) => {
                return Err(Error::Config("the IDM baseline only drives the LKV".into()))
            }
            (Controller::Gt(_), Role::Lkv) => {
                return Err(Error::Config("the GT baseline only drives the LCV".into()))
            }
            (Controller::Sdp(p), _) if p.role != role => {
                return Err(Error::RoleMismatch {
                    expected: role.to_string(),
                    found: format!("{} policy", p.role),
                })
            }
            _ => {}
        }
        Ok(Self {
            role,
            controller,
            v0,
            home_y: None,
            memory: AgentMemory::default(),
        })
    }

    pub fn sdp(policy: Arc<Policy>, v0: f64) -> Result<Self> {
        Self::new(policy.role, Controller::Sdp(policy), v0)
    }

    pub fn with_v0(mut self, v0: f64) -> Self {
        self.v0 = v0;
        self
    }

    pub(super) fn reset(&mut self) {
        self.home_y = None;
        self.memory = AgentMemory::default();
    }

    pub(super) fn check_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::RoleMismatch {
                expected: role.to_string(),
                found: self.role.to_string(),
            });
        }
        Ok(())
    }

    /// Opponent state implied by an observation.
    fn opponent(&self, own: &VehicleState, obs: &RelativeState) -> VehicleState {
        let sign = match self.role {
            Role::Lkv => 1.0,
            Role::Lcv => -1.0,
        };
        VehicleState {
            x: own.x + sign * obs.x_rel,
            y: own.y + sign * obs.y_rel,
            vx: own.vx + sign * obs.vx_rel,
            vy: own.vy + sign * obs.vy_rel,
        }
    }

    pub(super) fn decide(
        &mut self,
        own: &VehicleState,
        obs: &RelativeState,
        external: Option<(f64, f64)>,
        ctx: &DecisionContext,
    ) -> Command {
        let home_y = *self.home_y.get_or_insert(own.y);
        let mut emergency = false;
        let (ax, ay) = match &self.controller {
            Controller::Sdp(p) => p.lookup_action(obs),
            Controller::Idm(p) => {
                let p = IdmParams { v0: self.v0.max(1e-3), ..*p };
                let opp = self.opponent(own, obs);
                let (gap, dv) = idm_leader(own, &opp, ctx.lane_width);
                let a = idm_accel(own.vx, gap, dv, &p);
                emergency = a.emergency;
                (a.a, 0.0)
            }
            Controller::Gt(p) => {
                let opp = self.opponent(own, obs);
                let m = &mut self.memory;
                m.merged |= m.committed && (own.y - ctx.target_lane_y).abs() <= LANE_CHANGE_BAND;
                let ax = if m.merged {
                    let idm = IdmParams { v0: self.v0.max(1e-3), ..IdmParams::default() };
                    let (gap, dv) = idm_leader(own, &opp, ctx.lane_width);
                    let a = idm_accel(own.vx, gap, dv, &idm);
                    emergency = a.emergency;
                    a.a
                } else {
                    let d = gt_decide(own, &opp, m.prev_ax, 0.0, p);
                    m.committed |= d.commit;
                    d.a_x
                };
                let y_ref = if m.committed { ctx.target_lane_y } else { home_y };
                let (ay, integ) = lateral_pi(y_ref - own.y, own.vy, m.integ, p, ctx.dt_plan);
                m.integ = integ;
                (ax, ay)
            }
            Controller::Scripted(s) => {
                let (ax, ay) = s.at(ctx.t);
                match s.merge_at {
                    Some(tm) if self.role == Role::Lcv => {
                        let y_ref = if ctx.t + 1e-9 >= tm { ctx.target_lane_y } else { home_y };
                        let p = GtParams::default();
                        let (ay, integ) = lateral_pi(y_ref - own.y, own.vy, self.memory.integ, &p, ctx.dt_plan);
                        self.memory.integ = integ;
                        (ax, ay)
                    }
                    _ => (ax, ay),
                }
            }
            Controller::Replay(cmds) => cmds.get(ctx.plan_index).copied().unwrap_or((0.0, 0.0)),
            Controller::External => external.unwrap_or((0.0, 0.0)),
        };
        let ay = if self.role == Role::Lkv { 0.0 } else { ay };
        self.memory.prev_ax = ax;
        Command { ax, ay, emergency }
    }
}
