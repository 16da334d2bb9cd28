//! Tick-driven session state. No I/O: the server feeds it messages and
//! ticks, tests drive it directly.

use std::sync::Arc;

use coopdrive_core::config::ActionsConfig;
use coopdrive_core::sim::{compute_metrics, Agent, Controller, EpisodeRunner, External, Scenario, SimTrace};
use coopdrive_core::{Policy, Role};
use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};
use crate::protocol::{Accel, EndReason, EnvelopeMsg, ServerMessage, StateMsg, PROTOCOL_VERSION};

pub const TICK_RATE_HZ: f64 = 20.0;
/// Ticks without input after which the human command drops to zero (1 s).
pub const STALE_TICKS: u64 = 20;
pub const EPISODE_SECONDS: f64 = 20.0;
pub const SCENARIO_SPEED: f64 = 11.0;

/// Scenario by name, stepped and planned at the tick rate.
pub fn scenario_for(name: &str, duration: f64) -> Result<Scenario> {
    let base = Scenario::side_by_side(SCENARIO_SPEED);
    let mut s = match name {
        "side-by-side" => base,
        "side-by-side-mirrored" => base.mirrored(),
        other => return Err(DuetError::UnknownScenario(other.to_string())),
    };
    s.dt_sim = 1.0 / TICK_RATE_HZ;
    s.dt_plan = s.dt_sim;
    s.duration = duration;
    s.validate()?;
    Ok(s)
}

/// Box human commands are clamped to: the extremes of the role's action set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Envelope {
    pub ax: (f64, f64),
    pub ay: (f64, f64),
}

impl Envelope {
    pub fn for_role(role: Role) -> Self {
        let actions = ActionsConfig::default();
        let set = actions.for_role(role);
        let span = |v: &[f64]| {
            v.iter()
                .fold(None, |acc: Option<(f64, f64)>, &x| Some(acc.map_or((x, x), |(lo, hi)| (lo.min(x), hi.max(x)))))
                .unwrap_or((0.0, 0.0))
        };
        let ay = if role == Role::Lkv { (0.0, 0.0) } else { span(&set.ay_values) };
        Self { ax: span(&set.ax_values), ay }
    }

    pub fn clamp(&self, ax: f64, ay: f64) -> (f64, f64) {
        (ax.clamp(self.ax.0, self.ax.1), ay.clamp(self.ay.0, self.ay.1))
    }

    pub fn to_msg(self) -> EnvelopeMsg {
        EnvelopeMsg {
            ax_min: self.ax.0,
            ax_max: self.ax.1,
            ay_min: self.ay.0,
            ay_max: self.ay.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub policy: Arc<Policy>,
    pub human_role: Role,
    pub scenario_name: String,
    pub session_id: String,
    pub duration: f64,
    pub stale_ticks: u64,
}

impl SessionConfig {
    pub fn new(policy: Arc<Policy>, human_role: Role, scenario_name: &str) -> Result<Self> {
        if policy.role != human_role.opponent() {
            return Err(coopdrive_core::Error::RoleMismatch {
                expected: format!("{} policy", human_role.opponent()),
                found: format!("{} policy", policy.role),
            }
            .into());
        }
        scenario_for(scenario_name, EPISODE_SECONDS)?;
        Ok(Self {
            policy,
            human_role,
            scenario_name: scenario_name.to_string(),
            session_id: "s0".to_string(),
            duration: EPISODE_SECONDS,
            stale_ticks: STALE_TICKS,
        })
    }
}

/// Everything needed to replay an episode, written as the log header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub version: u32,
    pub session_id: String,
    pub episode: u32,
    pub human_role: Role,
    pub scenario_name: String,
    pub scenario: Scenario,
    pub v0: f64,
    pub stale_ticks: u64,
    pub tick_rate: f64,
    pub policy_grid_hash: String,
    pub policy_tpm_hash: String,
    pub policy_weights_hash: String,
}

struct Live {
    runner: EpisodeRunner,
    tick: u64,
    cmd: (f64, f64),
    seq: Option<u64>,
    last_input_tick: u64,
    applied: Vec<(f64, f64)>,
}

enum Phase {
    Lobby,
    Running(Box<Live>),
    Ended,
}

pub struct Session {
    cfg: SessionConfig,
    scenario: Scenario,
    envelope: Envelope,
    phase: Phase,
    episode: u32,
    greeted: bool,
    last_trace: Option<SimTrace>,
    last_commands: Vec<(f64, f64)>,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Result<Self> {
        let scenario = scenario_for(&cfg.scenario_name, cfg.duration)?;
        Ok(Self {
            envelope: Envelope::for_role(cfg.human_role),
            scenario,
            cfg,
            phase: Phase::Lobby,
            episode: 0,
            greeted: false,
            last_trace: None,
            last_commands: Vec::new(),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn is_running(&self) -> bool {
        matches!(self.phase, Phase::Running(_))
    }

    pub fn episode(&self) -> u32 {
        self.episode
    }

    /// Trace and applied human commands of the last finished episode.
    pub fn last_episode(&self) -> Option<(&SimTrace, &[(f64, f64)])> {
        self.last_trace.as_ref().map(|t| (t, self.last_commands.as_slice()))
    }

    pub fn meta(&self) -> EpisodeMeta {
        let p = &self.cfg.policy.meta;
        EpisodeMeta {
            version: PROTOCOL_VERSION,
            session_id: self.cfg.session_id.clone(),
            episode: self.episode,
            human_role: self.cfg.human_role,
            scenario_name: self.cfg.scenario_name.clone(),
            scenario: self.scenario.clone(),
            v0: SCENARIO_SPEED,
            stale_ticks: self.cfg.stale_ticks,
            tick_rate: TICK_RATE_HZ,
            policy_grid_hash: p.grid_hash.clone(),
            policy_tpm_hash: p.tpm_hash.clone(),
            policy_weights_hash: p.weights_hash.clone(),
        }
    }

    /// Claim the human seat. On success the episode clock starts.
    pub fn hello(&mut self, role: Role, scenario: Option<&str>, version: Option<u32>) -> Result<ServerMessage, String> {
        if self.greeted {
            return Err("a human is already driving this session".into());
        }
        if let Some(v) = version.filter(|&v| v != PROTOCOL_VERSION) {
            return Err(format!("protocol version {v} not supported (server speaks {PROTOCOL_VERSION})"));
        }
        if role != self.cfg.human_role {
            return Err(format!(
                "this server seats the human as {} (the policy drives the {})",
                self.cfg.human_role,
                self.cfg.human_role.opponent()
            ));
        }
        if let Some(s) = scenario.filter(|&s| s != self.cfg.scenario_name) {
            return Err(format!("scenario `{s}` not served here (running `{}`)", self.cfg.scenario_name));
        }
        self.greeted = true;
        self.start_episode().map_err(|e| e.to_string())
    }

    fn start_episode(&mut self) -> Result<ServerMessage> {
        let human = Agent::new(self.cfg.human_role, Controller::External, SCENARIO_SPEED)?;
        let machine = Agent::sdp(self.cfg.policy.clone(), SCENARIO_SPEED)?;
        let (lkv, lcv) = match self.cfg.human_role {
            Role::Lkv => (human, machine),
            Role::Lcv => (machine, human),
        };
        let runner = EpisodeRunner::new(lkv, lcv, &self.scenario)?;
        self.episode += 1;
        self.phase = Phase::Running(Box::new(Live {
            runner,
            tick: 0,
            cmd: (0.0, 0.0),
            seq: None,
            last_input_tick: 0,
            applied: Vec::new(),
        }));
        Ok(ServerMessage::Welcome {
            version: PROTOCOL_VERSION,
            session_id: self.cfg.session_id.clone(),
            episode: self.episode,
            role: self.cfg.human_role,
            scenario: self.cfg.scenario_name.clone(),
            tick_rate: TICK_RATE_HZ,
            envelope: self.envelope.to_msg(),
        })
    }

    /// Record a joystick sample. Returns `Ok(false)` when `seq` is not newer
    /// than the sample in force.
    pub fn input(&mut self, seq: u64, ax: f64, ay: f64) -> Result<bool, String> {
        let Phase::Running(live) = &mut self.phase else {
            return Err("no episode running".into());
        };
        if !(ax.is_finite() && ay.is_finite()) {
            return Err("input must be finite".into());
        }
        if live.seq.is_some_and(|s| seq <= s) {
            return Ok(false);
        }
        live.cmd = self.envelope.clamp(ax, ay);
        live.seq = Some(seq);
        live.last_input_tick = live.tick;
        Ok(true)
    }

    /// End the current episode (if any) and start another.
    pub fn reset(&mut self) -> Result<Vec<ServerMessage>, String> {
        if !self.greeted {
            return Err("send hello first".into());
        }
        let mut out = Vec::new();
        if self.is_running() {
            out.push(self.end(EndReason::Reset));
        }
        out.push(self.start_episode().map_err(|e| e.to_string())?);
        Ok(out)
    }

    /// The human left. Frees the seat for the next hello.
    pub fn disconnect(&mut self) -> Option<ServerMessage> {
        self.greeted = false;
        let end = self.is_running().then(|| self.end(EndReason::Disconnect));
        self.phase = Phase::Lobby;
        end
    }

    /// Advance one tick. Returns the state broadcast and, when the episode
    /// finishes on this tick, the end notice.
    pub fn tick(&mut self) -> Vec<ServerMessage> {
        let Phase::Running(live) = &mut self.phase else {
            return Vec::new();
        };
        let stale = live.tick - live.last_input_tick >= self.cfg.stale_ticks;
        let cmd = if stale { (0.0, 0.0) } else { live.cmd };
        let ext = match self.cfg.human_role {
            Role::Lkv => External { lkv: Some(cmd), lcv: None },
            Role::Lcv => External { lkv: None, lcv: Some(cmd) },
        };
        if live.runner.step(ext).is_none() {
            return Vec::new();
        }
        live.tick += 1;
        let held = live.runner.held();
        let (human, machine) = match self.cfg.human_role {
            Role::Lkv => ((held.a_lkv_x, 0.0), (held.a_lcv_x, held.a_lcv_y)),
            Role::Lcv => ((held.a_lcv_x, held.a_lcv_y), (held.a_lkv_x, 0.0)),
        };
        live.applied.push(human);
        let (lkv, lcv) = live.runner.states();
        let mut out = vec![ServerMessage::State(StateMsg {
            tick: live.tick,
            t: live.runner.time(),
            episode: self.episode,
            lkv,
            lcv,
            machine_action: Accel::from(machine),
            human_action: Accel::from(human),
            human_seq: live.seq,
            stale,
            collision: live.runner.collided(),
        })];
        if live.runner.finished() {
            let reason = if live.runner.collided() { EndReason::Collision } else { EndReason::Duration };
            out.push(self.end(reason));
        }
        out
    }

    fn end(&mut self, reason: EndReason) -> ServerMessage {
        let Phase::Running(live) = std::mem::replace(&mut self.phase, Phase::Ended) else {
            unreachable!("end() called without a running episode");
        };
        let live = *live;
        let trace = live.runner.into_trace();
        let metrics = if trace.records.is_empty() { None } else { compute_metrics(std::slice::from_ref(&trace), 0).ok() };
        self.last_trace = Some(trace);
        self.last_commands = live.applied;
        ServerMessage::SessionEnd {
            episode: self.episode,
            reason,
            metrics,
        }
    }
}
