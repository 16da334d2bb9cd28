//! Cooperative, interaction-aware lane-change decision making.
//!
//! Two vehicles share a lane-change encounter: a lane-keeping vehicle (LKV)
//! that only controls its longitudinal acceleration and a lane-changing
//! vehicle (LCV) that controls both axes. Each role learns a Markov model of
//! the other's accelerations from trajectory data ([`tpm`]), then solves a
//! discounted MDP over the relative state ([`interaction`], [`costs`],
//! [`sdp`]) to get a lookup-table policy. [`sim`] runs the policies in closed
//! loop against each other and against the [`baselines`].

pub mod baselines;
pub mod config;
pub mod costs;
pub mod error;
pub mod grid;
pub mod hash;
pub mod interaction;
pub mod reference;
pub mod sdp;
pub mod sim;
pub mod tpm;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use grid::{ActionSet, AxisSpec, StateGrid};
pub use interaction::{ActionPair, RelativeState, VehicleState};
pub use sdp::{Policy, SolverConfig};
pub use tpm::Tpm;

/// Which side of the encounter a vehicle plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Lkv,
    Lcv,
}

impl Role {
    pub fn opponent(self) -> Role {
        match self {
            Role::Lkv => Role::Lcv,
            Role::Lcv => Role::Lkv,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Lkv => "lkv",
            Role::Lcv => "lcv",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lkv" => Ok(Role::Lkv),
            "lcv" => Ok(Role::Lcv),
            other => Err(Error::Config(format!("unknown role `{other}`"))),
        }
    }
}
