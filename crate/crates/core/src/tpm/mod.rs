//! Markov model of the opponent's next acceleration.
//!
//! For every quantized condition cell `(x_rel, y_rel, vx_rel)` the model holds
//! a distribution over the opponent's discrete actions: the LKV's model ranges
//! over LCV `(ax, ay)` pairs, the LCV's model over LKV `ax` values.

mod corpus;
pub mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use corpus::{
    extract_interaction_scenarios, read_trajectories, read_trajectories_mapped, write_trajectories,
    ColumnMapping, ExtractionParams, InteractionScenario, ScenarioSample, TrajectoryRecord,
};

use crate::error::{Error, Result};
use crate::grid::{ActionSet, AxisSpec};
use crate::hash;
use crate::Role;

pub const TPM_FORMAT: &str = "coopdrive-tpm";
pub const TPM_VERSION: u32 = 1;

/// Default smoothing pseudo-count.
pub const DEFAULT_PRIOR_STRENGTH: f64 = 1.0;

const NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tpm {
    pub role: Role,
    pub condition_axes: [AxisSpec; 3],
    pub opponent_actions: ActionSet,
    /// Hash of whatever the model was built from.
    pub provenance: String,
    /// Pseudo-count applied by the last [`smooth`] call (0 if never smoothed).
    pub prior_strength: f64,
    support_counts: Vec<u64>,
    counts: Vec<u64>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TpmFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    tpm: Tpm,
}

impl Tpm {
    /// Model with explicitly given rows (one per condition cell, row-major
    /// over the three axes). Support counts are zero.
    pub fn from_rows(
        role: Role,
        condition_axes: [AxisSpec; 3],
        opponent_actions: ActionSet,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let mut tpm = Tpm {
            role,
            condition_axes,
            opponent_actions,
            provenance: hash::json_hash(&rows),
            prior_strength: 0.0,
            support_counts: Vec::new(),
            counts: Vec::new(),
            probs: rows.concat(),
        };
        let (nc, na) = (tpm.n_cells(), tpm.n_actions());
        if rows.len() != nc || rows.iter().any(|r| r.len() != na) {
            return Err(Error::InvalidParam(format!(
                "expected {nc} rows of {na} probabilities"
            )));
        }
        tpm.support_counts = vec![0; nc];
        tpm.counts = vec![0; nc * na];
        tpm.validate()?;
        Ok(tpm)
    }

    /// Every cell puts all mass on opponent action `action`.
    pub fn point_mass(
        role: Role,
        condition_axes: [AxisSpec; 3],
        opponent_actions: ActionSet,
        action: usize,
    ) -> Result<Self> {
        let na = opponent_actions.len();
        let nc: usize = condition_axes.iter().map(AxisSpec::len).product();
        let mut row = vec![0.0; na];
        *row.get_mut(action).ok_or_else(|| Error::InvalidParam(format!("no opponent action {action}")))? = 1.0;
        Self::from_rows(role, condition_axes, opponent_actions, &vec![row; nc])
    }

    pub fn n_cells(&self) -> usize {
        self.condition_axes.iter().map(AxisSpec::len).product()
    }

    pub fn n_actions(&self) -> usize {
        self.opponent_actions.len()
    }

    pub fn cell_lens(&self) -> [usize; 3] {
        std::array::from_fn(|d| self.condition_axes[d].len())
    }

    pub fn flat_cell(&self, cell: [usize; 3]) -> Result<usize> {
        let lens = self.cell_lens();
        for d in 0..3 {
            if cell[d] >= lens[d] {
                return Err(Error::IndexOutOfRange {
                    axis: self.condition_axes[d].name.clone(),
                    index: cell[d],
                    len: lens[d],
                });
            }
        }
        Ok((cell[0] * lens[1] + cell[1]) * lens[2] + cell[2])
    }

    /// Quantized condition cell of a continuous relative state.
    pub fn condition_cell(&self, x_rel: f64, y_rel: f64, vx_rel: f64) -> [usize; 3] {
        [
            self.condition_axes[0].quantize(x_rel),
            self.condition_axes[1].quantize(y_rel),
            self.condition_axes[2].quantize(vx_rel),
        ]
    }

    /// Probability vector for flat cell `c` (no bounds check beyond slicing).
    #[inline]
    pub fn row(&self, c: usize) -> &[f64] {
        let n = self.n_actions();
        &self.probs[c * n..(c + 1) * n]
    }

    pub fn support(&self, c: usize) -> u64 {
        self.support_counts[c]
    }

    pub fn support_counts(&self) -> &[u64] {
        &self.support_counts
    }

    pub fn total_support(&self) -> u64 {
        self.support_counts.iter().sum()
    }

    /// Raw action counts for flat cell `c`.
    pub fn counts(&self, c: usize) -> &[u64] {
        let n = self.n_actions();
        &self.counts[c * n..(c + 1) * n]
    }

    /// Fraction of condition cells with at least one sample.
    pub fn coverage(&self) -> f64 {
        let covered = self.support_counts.iter().filter(|&&n| n > 0).count();
        covered as f64 / self.n_cells() as f64
    }

    /// Largest `|sum(p) - 1|` over all cells.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.n_cells())
            .map(|c| (self.row(c).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let (nc, na) = (self.n_cells(), self.n_actions());
        if self.probs.len() != nc * na || self.counts.len() != nc * na || self.support_counts.len() != nc {
            return Err(Error::InvalidParam("TPM table sizes do not match its axes".into()));
        }
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParam("TPM probability outside [0, 1]".into()));
        }
        let err = self.max_normalization_error();
        if err >= NORM_TOL {
            return Err(Error::InvalidParam(format!(
                "TPM row not normalized (error {err:e})"
            )));
        }
        Ok(())
    }

    /// Hash of the condition axes, used to check grid compatibility.
    pub fn axes_hash(&self) -> String {
        hash::json_hash(&self.condition_axes)
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let file = TpmFile {
            format: TPM_FORMAT.into(),
            version: TPM_VERSION,
            tpm: self.clone(),
        };
        let mut bytes = serde_json::to_vec(&file).expect("TPM serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let file: TpmFile = serde_json::from_slice(bytes).map_err(|e| Error::Format {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        if file.format != TPM_FORMAT || file.version != TPM_VERSION {
            return Err(Error::Format {
                path: path.to_owned(),
                reason: format!("expected {TPM_FORMAT} v{TPM_VERSION}, got {} v{}", file.format, file.version),
            });
        }
        file.tpm.validate()?;
        Ok(file.tpm)
    }

    /// Content hash of the serialized model.
    pub fn content_hash(&self) -> String {
        hash::sha256_hex(&self.to_json_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_json_bytes(&bytes, path)
    }
}

/// Triangular prior peaked at zero acceleration: weight `1 / (1 + |a|)` per
/// axis, multiplied across axes for pair-valued action sets.
pub fn default_prior(actions: &ActionSet) -> Vec<f64> {
    let w: Vec<f64> = actions
        .actions()
        .map(|(ax, ay)| {
            let wy = if actions.is_lateral() { 1.0 / (1.0 + ay.abs()) } else { 1.0 };
            wy / (1.0 + ax.abs())
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Uniform prior over all opponent actions.
pub fn uniform_prior(actions: &ActionSet) -> Vec<f64> {
    vec![1.0 / actions.len() as f64; actions.len()]
}

/// Opponent `(ax, ay)` for `role`'s model, taken from a scenario sample.
fn opponent_accel(role: Role, s: &ScenarioSample) -> (f64, f64) {
    match role {
        Role::Lkv => (s.a_lcv_x, s.a_lcv_y),
        Role::Lcv => (s.a_lkv_x, 0.0),
    }
}

/// Empirical conditional distribution of opponent actions. Cells without
/// samples hold the default prior so every row is a distribution.
pub fn build_tpm(
    scenarios: &[InteractionScenario],
    role: Role,
    condition_axes: [AxisSpec; 3],
    opponent_actions: ActionSet,
) -> Result<Tpm> {
    if scenarios.is_empty() {
        return Err(Error::NoScenarios);
    }
    for axis in &condition_axes {
        axis.validate()?;
    }
    opponent_actions.validate()?;
    if role == Role::Lkv && !opponent_actions.is_lateral() {
        return Err(Error::InvalidActionSet(
            "the LKV's opponent model needs lateral (ay) actions".into(),
        ));
    }
    if role == Role::Lcv && opponent_actions.is_lateral() {
        return Err(Error::InvalidActionSet(
            "the LCV's opponent model ranges over ax only".into(),
        ));
    }

    let mut tpm = Tpm {
        role,
        condition_axes,
        opponent_actions,
        provenance: scenario_hash(scenarios),
        prior_strength: 0.0,
        support_counts: Vec::new(),
        counts: Vec::new(),
        probs: Vec::new(),
    };
    let (nc, na) = (tpm.n_cells(), tpm.n_actions());
    tpm.support_counts = vec![0; nc];
    tpm.counts = vec![0; nc * na];

    for sample in scenarios.iter().flat_map(|s| s.samples.iter()) {
        let cell = tpm.condition_cell(sample.x_rel, sample.y_rel, sample.vx_rel);
        let c = tpm.flat_cell(cell)?;
        let (ax, ay) = opponent_accel(role, sample);
        let m = tpm.opponent_actions.nearest(ax, ay);
        tpm.counts[c * na + m] += 1;
        tpm.support_counts[c] += 1;
    }

    let prior = default_prior(&tpm.opponent_actions);
    tpm.probs = vec![0.0; nc * na];
    for c in 0..nc {
        let total = tpm.support_counts[c];
        let row = &mut tpm.probs[c * na..(c + 1) * na];
        if total == 0 {
            row.copy_from_slice(&prior);
        } else {
            for (p, &n) in row.iter_mut().zip(&tpm.counts[c * na..(c + 1) * na]) {
                *p = n as f64 / total as f64;
            }
        }
    }
    Ok(tpm)
}

/// Additive smoothing toward the default prior.
pub fn smooth(tpm: &Tpm, prior_strength: f64) -> Result<Tpm> {
    let prior = default_prior(&tpm.opponent_actions);
    smooth_with_prior(tpm, prior_strength, &prior)
}

/// Additive smoothing: `(counts + k * prior) / (total + k)` per cell.
/// Unsupported cells become exactly `prior`; `k = 0` leaves the model as-is.
pub fn smooth_with_prior(tpm: &Tpm, prior_strength: f64, prior: &[f64]) -> Result<Tpm> {
    if !(prior_strength >= 0.0 && prior_strength.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "prior strength must be a finite non-negative number, got {prior_strength}"
        )));
    }
    let na = tpm.n_actions();
    if prior.len() != na {
        return Err(Error::InvalidParam(format!(
            "prior has {} entries, model has {na} actions",
            prior.len()
        )));
    }
    if prior_strength == 0.0 {
        return Ok(tpm.clone());
    }
    let mut out = tpm.clone();
    out.prior_strength = prior_strength;
    for c in 0..tpm.n_cells() {
        let total = tpm.support_counts[c];
        let row = &mut out.probs[c * na..(c + 1) * na];
        if total == 0 {
            row.copy_from_slice(prior);
            continue;
        }
        let denom = total as f64 + prior_strength;
        for ((p, &n), &q) in row.iter_mut().zip(tpm.counts(c)).zip(prior) {
            *p = (n as f64 + prior_strength * q) / denom;
        }
    }
    Ok(out)
}

/// Count, mirror laterally and smooth: the pipeline behind the reference
/// models.
pub fn learn_tpm(
    scenarios: &[InteractionScenario],
    role: Role,
    condition_axes: [AxisSpec; 3],
    opponent_actions: ActionSet,
    prior_strength: f64,
) -> Result<Tpm> {
    let raw = build_tpm(scenarios, role, condition_axes, opponent_actions)?;
    smooth(&symmetrize_lateral(&raw)?, prior_strength)
}

/// Pool every cell's counts with those of its lateral mirror image
/// (`y_rel -> -y_rel`, opponent `ay -> -ay`), so a model learned from lane
/// changes in both directions treats them alike. Works on raw counts; smooth
/// afterwards.
pub fn symmetrize_lateral(tpm: &Tpm) -> Result<Tpm> {
    if tpm.prior_strength != 0.0 {
        return Err(Error::InvalidParam("symmetrize before smoothing".into()));
    }
    let y = &tpm.condition_axes[1];
    if (y.lo + y.hi).abs() > 1e-12 {
        return Err(Error::InvalidAxis {
            axis: y.name.clone(),
            reason: "lateral axis must be centred on zero to mirror".into(),
        });
    }
    let acts = &tpm.opponent_actions;
    let ny_act = acts.ay_values.len().max(1);
    if acts.is_lateral() {
        let ay = &acts.ay_values;
        if (0..ny_act).any(|i| (ay[i] + ay[ny_act - 1 - i]).abs() > 1e-12) {
            return Err(Error::InvalidActionSet("lateral actions must be symmetric to mirror".into()));
        }
    }
    let mirror_action = |m: usize| {
        if acts.is_lateral() {
            let (ix, iy) = (m / ny_act, m % ny_act);
            ix * ny_act + (ny_act - 1 - iy)
        } else {
            m
        }
    };
    let [nx, ny, nv] = tpm.cell_lens();
    let (nc, na) = (tpm.n_cells(), tpm.n_actions());
    let mut out = tpm.clone();
    out.provenance = hash::json_hash(&(&tpm.provenance, "mirror-y"));
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nv {
                let c = tpm.flat_cell([i, j, k])?;
                let cm = tpm.flat_cell([i, ny - 1 - j, k])?;
                out.support_counts[c] = tpm.support_counts[c] + tpm.support_counts[cm];
                for m in 0..na {
                    out.counts[c * na + m] = tpm.counts[c * na + m] + tpm.counts[cm * na + mirror_action(m)];
                }
            }
        }
    }
    let prior = default_prior(acts);
    for c in 0..nc {
        let total = out.support_counts[c];
        let row = &mut out.probs[c * na..(c + 1) * na];
        if total == 0 {
            row.copy_from_slice(&prior);
        } else {
            for (p, &n) in row.iter_mut().zip(&out.counts[c * na..(c + 1) * na]) {
                *p = n as f64 / total as f64;
            }
        }
    }
    Ok(out)
}

/// Distribution over opponent action indices for condition cell `(i, j, k)`.
pub fn opponent_dist(tpm: &Tpm, cell: [usize; 3]) -> Result<&[f64]> {
    let c = tpm.flat_cell(cell)?;
    Ok(tpm.row(c))
}

/// Order-independent hash of the scenario set.
fn scenario_hash(scenarios: &[InteractionScenario]) -> String {
    let mut per: Vec<String> = scenarios.iter().map(hash::json_hash).collect();
    per.sort();
    hash::json_hash(&per)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axes() -> [AxisSpec; 3] {
        crate::grid::StateGrid::desk().condition_axes()
    }

    fn sample(x: f64, y: f64, vx: f64, a_lkv: f64, a_lcv: (f64, f64)) -> ScenarioSample {
        ScenarioSample {
            t: 0.0,
            x_rel: x,
            y_rel: y,
            vx_rel: vx,
            a_lkv_x: a_lkv,
            a_lcv_x: a_lcv.0,
            a_lcv_y: a_lcv.1,
        }
    }

    fn scenario(samples: Vec<ScenarioSample>) -> InteractionScenario {
        InteractionScenario {
            lcv_id: 1,
            lkv_id: 2,
            t_start: 0.0,
            t_end: 1.0,
            samples,
        }
    }

    /// Three LKV accelerations {0, 0, 1.5} landing in one cell.
    pub(crate) fn hand_count_fixture() -> Vec<InteractionScenario> {
        vec![scenario(vec![
            sample(6.0, 2.625, 0.0, 0.0, (0.0, 0.0)),
            sample(6.2, 2.6, 0.1, 0.1, (0.0, 0.0)),
            sample(5.9, 2.7, -0.2, 1.4, (0.0, 0.0)),
        ])]
    }

    #[test]
    fn hand_counted_cell() {
        let tpm = build_tpm(&hand_count_fixture(), Role::Lcv, axes(), ActionSet::lkv_default()).unwrap();
        let cell = tpm.condition_cell(6.0, 2.625, 0.0);
        let p = opponent_dist(&tpm, cell).unwrap();
        assert_eq!(p, &[0.0, 0.0, 2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(tpm.total_support(), 3);
        tpm.validate().unwrap();
    }

    #[test]
    fn point_mass_cell() {
        let sc = vec![scenario(vec![sample(0.0, 0.0, 0.0, -1.5, (0.0, 0.0)); 4])];
        let tpm = build_tpm(&sc, Role::Lcv, axes(), ActionSet::lkv_default()).unwrap();
        let p = opponent_dist(&tpm, tpm.condition_cell(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(p, &[0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            build_tpm(&[], Role::Lkv, axes(), ActionSet::lcv_default()),
            Err(Error::NoScenarios)
        ));
    }

    #[test]
    fn smoothing_examples() {
        let sc = vec![scenario(vec![sample(0.0, 0.0, 0.0, -3.0, (0.0, 0.0)); 2])];
        let tpm = build_tpm(&sc, Role::Lcv, axes(), ActionSet::lkv_default()).unwrap();
        let cell = tpm.flat_cell(tpm.condition_cell(0.0, 0.0, 0.0)).unwrap();

        let uniform = uniform_prior(&tpm.opponent_actions);
        let s = smooth_with_prior(&tpm, 5.0, &uniform).unwrap();
        let want = [3.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0];
        for (p, w) in s.row(cell).iter().zip(want) {
            assert!((p - w).abs() < 1e-15);
        }

        assert_eq!(smooth(&tpm, 0.0).unwrap(), tpm);
        assert!(smooth(&tpm, -1.0).is_err());

        let s = smooth(&tpm, 1.0).unwrap();
        let prior = default_prior(&tpm.opponent_actions);
        let empty = tpm.flat_cell([0, 0, 0]).unwrap();
        assert_eq!(s.row(empty), prior.as_slice());
        assert!(s.max_normalization_error() < 1e-9);
    }

    #[test]
    fn triangular_prior_peaks_at_zero() {
        let p = default_prior(&ActionSet::lkv_default());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[2] > p[1] && p[1] > p[0]);
        assert_eq!(p[1], p[3]);
        let q = default_prior(&ActionSet::lcv_default());
        let zero = ActionSet::lcv_default().zero_action();
        assert!(q.iter().all(|&x| x <= q[zero]));
    }

    #[test]
    fn out_of_range_cell() {
        let tpm = build_tpm(&hand_count_fixture(), Role::Lcv, axes(), ActionSet::lkv_default()).unwrap();
        assert!(opponent_dist(&tpm, [0, 0, 99]).is_err());
    }

    #[test]
    fn permutation_invariant_and_round_trip() {
        let mut sc = hand_count_fixture();
        sc.push(scenario(vec![sample(-3.0, 1.0, 1.0, 1.5, (-1.5, 0.5))]));
        let a = build_tpm(&sc, Role::Lkv, axes(), ActionSet::lcv_default()).unwrap();
        sc.reverse();
        let b = build_tpm(&sc, Role::Lkv, axes(), ActionSet::lcv_default()).unwrap();
        assert_eq!(a, b);

        let s = smooth(&a, 1.0).unwrap();
        let bytes = s.to_json_bytes();
        let back = Tpm::from_json_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json_bytes(), bytes);
    }

    #[test]
    fn role_action_mismatch() {
        assert!(build_tpm(&hand_count_fixture(), Role::Lkv, axes(), ActionSet::lkv_default()).is_err());
        assert!(build_tpm(&hand_count_fixture(), Role::Lcv, axes(), ActionSet::lcv_default()).is_err());
    }

    #[test]
    fn lateral_mirror_pools_counts() {
        let acts = ActionSet::lcv_default();
        let sc = vec![scenario(vec![sample(6.0, 1.75, 1.0, 0.0, (1.5, 0.5))])];
        let raw = build_tpm(&sc, Role::Lkv, axes(), acts.clone()).unwrap();
        let sym = symmetrize_lateral(&raw).unwrap();
        let up = sym.flat_cell(sym.condition_cell(6.0, 1.75, 1.0)).unwrap();
        let down = sym.flat_cell(sym.condition_cell(6.0, -1.75, 1.0)).unwrap();
        assert_eq!(sym.row(up)[acts.nearest(1.5, 0.5)], 1.0);
        assert_eq!(sym.row(down)[acts.nearest(1.5, -0.5)], 1.0);
        assert_eq!(sym.support(down), 1);
        assert!(symmetrize_lateral(&smooth(&raw, 1.0).unwrap()).is_err());
    }

    #[test]
    fn symmetrized_model_is_mirror_invariant() {
        let recs = synthetic::generate(&synthetic::SyntheticConfig::default());
        let sc = extract_interaction_scenarios(&recs, &Default::default()).unwrap();
        for (role, acts) in [(Role::Lkv, ActionSet::lcv_default()), (Role::Lcv, ActionSet::lkv_default())] {
            let tpm = smooth(&symmetrize_lateral(&build_tpm(&sc, role, axes(), acts.clone()).unwrap()).unwrap(), 1.0).unwrap();
            let [nx, ny, nv] = tpm.cell_lens();
            for (i, j, k) in (0..nx).flat_map(|i| (0..ny).flat_map(move |j| (0..nv).map(move |k| (i, j, k)))) {
                let a = tpm.row(tpm.flat_cell([i, j, k]).unwrap());
                let b = tpm.row(tpm.flat_cell([i, ny - 1 - j, k]).unwrap());
                for (m, (ax, ay)) in acts.actions().enumerate() {
                    let mm = acts.nearest(ax, -ay);
                    assert!((a[m] - b[mm]).abs() < 1e-15, "{role} cell ({i},{j},{k})");
                }
            }
        }
    }
}
