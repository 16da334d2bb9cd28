//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use coopdrive_core::config::ActionsConfig;
use coopdrive_core::costs::StageWeights;
use coopdrive_core::tpm::{self, synthetic, InteractionScenario, Tpm};
use coopdrive_core::{reference, Policy, Role, StateGrid};

/// 1125-cell grid: fast enough to solve inside a benchmark loop.
pub fn small_grid() -> StateGrid {
    StateGrid::from_ranges([
        (-12.0, 12.0, 3.0),
        (-3.5, 3.5, 1.75),
        (-2.0, 2.0, 1.0),
        (-1.0, 1.0, 0.5),
        (-2.0, 2.0, 2.0),
    ])
}

pub fn synthetic_scenarios() -> Vec<InteractionScenario> {
    let recs = synthetic::generate(&synthetic::SyntheticConfig::default());
    tpm::extract_interaction_scenarios(&recs, &Default::default()).expect("synthetic scenarios")
}

pub fn model(scenarios: &[InteractionScenario], role: Role, grid: &StateGrid) -> Tpm {
    reference::learn(scenarios, role, grid, &ActionsConfig::default()).expect("learn")
}

pub fn policy(role: Role, grid: &StateGrid, model: &Tpm) -> Arc<Policy> {
    Arc::new(reference::solve(role, grid, model, &StageWeights::neutral(role)).expect("solve"))
}
