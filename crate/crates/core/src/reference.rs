//! The reference pipeline: shipped synthetic corpus, opponent models learned
//! from it on the desk grid, and the policies solved against them.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::config::ActionsConfig;
use crate::costs::StageWeights;
use crate::error::Result;
use crate::grid::StateGrid;
use crate::sdp::{policy_iteration, Policy, SolverConfig};
use crate::tpm::{self, InteractionScenario, Tpm};
use crate::Role;

/// Directory holding the shipped data files.
pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// The synthetic trajectory corpus, `vehicle_id,t,x,y,vx,vy,lane_id`.
pub fn corpus_path() -> PathBuf {
    data_dir().join("synthetic_corpus.csv")
}

/// The shipped opponent model for `role` on the desk grid.
pub fn tpm_path(role: Role) -> PathBuf {
    data_dir().join(format!("tpm_{role}.json"))
}

/// Interaction scenarios of a trajectory CSV with default extraction.
pub fn load_scenarios(path: &Path) -> Result<Vec<InteractionScenario>> {
    let records = tpm::read_trajectories(BufReader::new(File::open(path)?))?;
    tpm::extract_interaction_scenarios(&records, &Default::default())
}

/// Opponent model for `role` on the condition axes of `grid`.
pub fn learn(scenarios: &[InteractionScenario], role: Role, grid: &StateGrid, actions: &ActionsConfig) -> Result<Tpm> {
    tpm::learn_tpm(
        scenarios,
        role,
        grid.condition_axes(),
        actions.opponent_of(role).clone(),
        tpm::DEFAULT_PRIOR_STRENGTH,
    )
}

/// Solve `role`'s policy with default actions and solver settings.
pub fn solve(role: Role, grid: &StateGrid, model: &Tpm, weights: &StageWeights) -> Result<Policy> {
    let actions = ActionsConfig::default();
    policy_iteration(grid, actions.for_role(role), model, weights, &SolverConfig::default())
}
