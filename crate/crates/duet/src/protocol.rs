//! Wire messages. One JSON object per line over raw TCP, one per text
//! frame over WebSocket. Every message carries a `type` tag.

use coopdrive_core::sim::MetricsReport;
use coopdrive_core::{Role, VehicleState};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// Longitudinal and lateral acceleration, m/s².
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accel {
    pub ax: f64,
    pub ay: f64,
}

impl From<(f64, f64)> for Accel {
    fn from((ax, ay): (f64, f64)) -> Self {
        Self { ax, ay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Claim the human seat. Starts the episode clock.
    Hello {
        role: Role,
        #[serde(default)]
        scenario: Option<String>,
        #[serde(default)]
        version: Option<u32>,
    },
    /// Joystick sample. `seq` must strictly increase; older samples are
    /// dropped.
    Input {
        seq: u64,
        ax: f64,
        #[serde(default)]
        ay: f64,
    },
    /// End the running episode and start a fresh one.
    Reset,
}

/// Bounds human commands are clamped to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeMsg {
    pub ax_min: f64,
    pub ax_max: f64,
    pub ay_min: f64,
    pub ay_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    /// Ticks completed in this episode, starting at 1.
    pub tick: u64,
    /// Simulated time after the tick, s.
    pub t: f64,
    pub episode: u32,
    pub lkv: VehicleState,
    pub lcv: VehicleState,
    pub machine_action: Accel,
    /// Command applied on this tick after clamping and staleness.
    pub human_action: Accel,
    /// Sequence number of the input in force, if any.
    pub human_seq: Option<u64>,
    /// No input for longer than the staleness window; command zeroed.
    pub stale: bool,
    pub collision: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Collision,
    Duration,
    Reset,
    Disconnect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Welcome {
        version: u32,
        session_id: String,
        episode: u32,
        role: Role,
        scenario: String,
        tick_rate: f64,
        envelope: EnvelopeMsg,
    },
    State(StateMsg),
    SessionEnd {
        episode: u32,
        reason: EndReason,
        metrics: Option<MetricsReport>,
    },
    Refused {
        reason: String,
    },
    /// Malformed or out-of-turn message; the connection stays open.
    Error {
        reason: String,
    },
}

impl ServerMessage {
    pub fn refused(reason: impl Into<String>) -> Self {
        ServerMessage::Refused { reason: reason.into() }
    }

    pub fn error(reason: impl Into<String>) -> Self {
        ServerMessage::Error { reason: reason.into() }
    }
}

pub fn parse_client(line: &str) -> Result<ClientMessage, String> {
    serde_json::from_str(line).map_err(|e| format!("bad message: {e}"))
}
