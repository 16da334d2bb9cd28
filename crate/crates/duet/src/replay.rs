//! Offline replay of a logged episode through the batch simulator.

use std::path::Path;
use std::sync::Arc;

use coopdrive_core::sim::{run_episode, Agent, Controller, SimTrace};
use coopdrive_core::{Policy, Role, VehicleState};

use crate::error::{DuetError, Result};
use crate::log_file::{read_log, Direction};
use crate::protocol::{ServerMessage, StateMsg};
use crate::session::EpisodeMeta;

/// Re-run an episode with the human seat replaying `commands`, one per tick.
pub fn replay(meta: &EpisodeMeta, commands: &[(f64, f64)], policy: Arc<Policy>) -> Result<SimTrace> {
    let mut scenario = meta.scenario.clone();
    scenario.duration = commands.len() as f64 * scenario.dt_sim;
    let human = Agent::new(meta.human_role, Controller::Replay(Arc::new(commands.to_vec())), meta.v0)?;
    let machine = Agent::sdp(policy, meta.v0)?;
    let (lkv, lcv) = match meta.human_role {
        Role::Lkv => (human, machine),
        Role::Lcv => (machine, human),
    };
    Ok(run_episode(&lkv, &lcv, &scenario)?)
}

/// Result of checking a log against its replay.
#[derive(Debug)]
pub struct ReplayCheck {
    pub meta: EpisodeMeta,
    pub ticks: usize,
    /// Ticks whose logged states or machine action differ in any bit.
    pub mismatched_ticks: Vec<u64>,
    pub trace: SimTrace,
}

impl ReplayCheck {
    pub fn exact(&self) -> bool {
        self.mismatched_ticks.is_empty()
    }
}

fn same(a: &VehicleState, b: &VehicleState) -> bool {
    [a.x, a.y, a.vx, a.vy].map(f64::to_bits) == [b.x, b.y, b.vx, b.vy].map(f64::to_bits)
}

/// Replay a session log and compare every broadcast state with the
/// simulator, bit for bit.
pub fn replay_log(path: &Path, policy: Arc<Policy>) -> Result<ReplayCheck> {
    let (meta, records) = read_log(path)?;
    let bad = |reason: String| DuetError::BadLog {
        path: path.to_path_buf(),
        reason,
    };
    let p = &policy.meta;
    if p.grid_hash != meta.policy_grid_hash || p.tpm_hash != meta.policy_tpm_hash || p.weights_hash != meta.policy_weights_hash {
        return Err(bad(format!(
            "policy does not match the logged one (grid {} vs {}, tpm {} vs {})",
            p.grid_hash, meta.policy_grid_hash, p.tpm_hash, meta.policy_tpm_hash
        )));
    }
    let mut states: Vec<StateMsg> = Vec::new();
    for r in records.iter().filter(|r| r.dir == Direction::Out) {
        if let Ok(ServerMessage::State(s)) = serde_json::from_value::<ServerMessage>(r.msg.clone()) {
            if s.episode == meta.episode {
                states.push(s);
            }
        }
    }
    for (i, s) in states.iter().enumerate() {
        if s.tick != i as u64 + 1 {
            return Err(bad(format!("expected tick {}, found {}", i + 1, s.tick)));
        }
    }
    let commands: Vec<(f64, f64)> = states.iter().map(|s| (s.human_action.ax, s.human_action.ay)).collect();
    let trace = replay(&meta, &commands, policy)?;
    let mut mismatched = Vec::new();
    for (i, s) in states.iter().enumerate() {
        let (lkv, lcv) = match trace.records.get(i + 1) {
            Some(r) => (r.lkv, r.lcv),
            None => (trace.final_lkv, trace.final_lcv),
        };
        let machine = trace.records.get(i).map(|r| match meta.human_role {
            Role::Lkv => (r.a_lcv_x, r.a_lcv_y),
            Role::Lcv => (r.a_lkv_x, 0.0),
        });
        let action_ok = machine.is_some_and(|(ax, ay)| {
            ax.to_bits() == s.machine_action.ax.to_bits() && ay.to_bits() == s.machine_action.ay.to_bits()
        });
        if !(action_ok && same(&lkv, &s.lkv) && same(&lcv, &s.lcv)) {
            mismatched.push(s.tick);
        }
    }
    if trace.records.len() != states.len() {
        mismatched.push(states.len() as u64 + 1);
    }
    Ok(ReplayCheck {
        meta,
        ticks: states.len(),
        mismatched_ticks: mismatched,
        trace,
    })
}
