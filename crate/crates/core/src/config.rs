//! Shared TOML configuration for the CLI and the duet server.
//!
//! Every table is optional; missing keys fall back to the defaults used
//! throughout the crate.
//!
//! ```toml
//! [grid]
//! preset = "desk"
//!
//! [weights]
//! preset = "neutral"
//!
//! [weights.lcv]
//! beta_agg = -0.02   # override single fields of the preset
//!
//! [solver]
//! gamma = 0.95
//!
//! [eval]
//! episodes = 1000
//! seed = 7
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{GtParams, IdmParams};
use crate::costs::StageWeights;
use crate::error::{Error, Result};
use crate::grid::{ActionSet, AxisSpec, StateGrid};
use crate::sdp::SolverConfig;
use crate::sim::Scenario;
use crate::Role;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// `desk` or `full`; ignored when `axes` is given.
    pub preset: String,
    /// Explicit axes in grid order.
    pub axes: Option<Vec<AxisSpec>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            axes: None,
        }
    }
}

impl GridConfig {
    pub fn resolve(&self) -> Result<StateGrid> {
        match &self.axes {
            Some(axes) => StateGrid::try_from(axes.clone()),
            None => StateGrid::preset(&self.preset),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionsConfig {
    pub lkv: ActionSet,
    pub lcv: ActionSet,
}

impl Default for ActionsConfig {
    fn default() -> Self {
        Self {
            lkv: ActionSet::lkv_default(),
            lcv: ActionSet::lcv_default(),
        }
    }
}

impl ActionsConfig {
    pub fn for_role(&self, role: Role) -> &ActionSet {
        match role {
            Role::Lkv => &self.lkv,
            Role::Lcv => &self.lcv,
        }
    }

    /// Actions an opponent TPM for `role` is built over.
    pub fn opponent_of(&self, role: Role) -> &ActionSet {
        match role {
            Role::Lkv => &self.lcv,
            Role::Lcv => &self.lkv,
        }
    }
}

/// A named preset with optional per-field overrides for each role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub preset: String,
    pub lkv: toml::Table,
    pub lcv: toml::Table,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            preset: "neutral".into(),
            lkv: toml::Table::new(),
            lcv: toml::Table::new(),
        }
    }
}

impl WeightsConfig {
    pub fn for_role(&self, role: Role) -> Result<StageWeights> {
        let base = StageWeights::preset(role, &self.preset)?;
        let overrides = match role {
            Role::Lkv => &self.lkv,
            Role::Lcv => &self.lcv,
        };
        let weights = if overrides.is_empty() {
            base
        } else {
            let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
            for (k, v) in overrides {
                if !table.contains_key(k) {
                    return Err(Error::Config(format!("unknown {role} weight `{k}`")));
                }
                table.insert(k.clone(), v.clone());
            }
            table
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("{role} weights: {e}")))?
        };
        weights.validate()?;
        Ok(weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: Option<u64>,
    pub harsh: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            seed: None,
            harsh: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub actions: ActionsConfig,
    pub weights: WeightsConfig,
    pub solver: SolverConfig,
    pub idm: IdmParams,
    pub gt: GtParams,
    pub scenario: Scenario,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.resolve()?;
        self.actions.lkv.validate()?;
        self.actions.lcv.validate()?;
        if self.actions.lkv.is_lateral() {
            return Err(Error::Config("LKV actions must not include lateral accelerations".into()));
        }
        self.weights.for_role(Role::Lkv)?;
        self.weights.for_role(Role::Lcv)?;
        self.solver.validate()?;
        self.idm.validate()?;
        self.gt.validate()?;
        self.scenario.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        Ok(())
    }
}
