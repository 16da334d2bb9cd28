//! Real-time duet: one human drives one vehicle against an SDP policy
//! driving the other.
//!
//! A single tick loop owns the [`Session`]. Network readers hand messages to
//! it over a channel, and state broadcasts are fire-and-forget, so a slow
//! client never stalls the simulation. Every episode is logged as JSON lines
//! and replays bit-exactly through [`replay::replay_log`].

pub mod error;
pub mod log_file;
pub mod protocol;
pub mod replay;
pub mod server;
pub mod session;

pub use error::{DuetError, Result};
pub use protocol::{ClientMessage, ServerMessage, PROTOCOL_VERSION};
pub use server::{serve, spawn, ServerConfig, ServerHandle};
pub use session::{Envelope, Session, SessionConfig, TICK_RATE_HZ};
