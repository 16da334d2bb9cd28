//! Stochastic dynamic programming over the relative-state MDP.
//!
//! Each role's infinite-horizon discounted problem is solved by policy
//! iteration. Successor values are read from the grid by multilinear
//! interpolation, and the opponent's next action is drawn from the role's
//! [`Tpm`]. Backups inside one sweep are Jacobi-style (they only read the
//! previous sweep), so results do not depend on the number of worker threads.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{StageCost, StageWeights};
use crate::error::{Error, Result};
use crate::grid::{ActionSet, StateGrid, Stencil, DIMS};
use crate::hash;
use crate::interaction::{step_mdp, RelativeState};
use crate::tpm::Tpm;
use crate::Role;

/// Two Q-values closer than this are treated as tied.
pub const TIE_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub gamma: f64,
    /// Sup-norm change below which a policy evaluation stops.
    pub eval_tol: f64,
    pub max_eval_sweeps: usize,
    pub max_policy_iters: usize,
    /// Planning step, seconds.
    pub dt: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            eval_tol: 1e-6,
            max_eval_sweeps: 20_000,
            max_policy_iters: 200,
            dt: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParam(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if !(self.eval_tol > 0.0) {
            return Err(Error::InvalidParam("eval_tol must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParam("dt must be positive".into()));
        }
        if self.max_policy_iters == 0 || self.max_eval_sweeps == 0 {
            return Err(Error::InvalidParam("max_policy_iters and max_eval_sweeps must be positive".into()));
        }
        Ok(())
    }
}

/// A fully specified MDP for one role.
pub struct Mdp<'a, C: StageCost + ?Sized> {
    pub grid: &'a StateGrid,
    pub actions: &'a ActionSet,
    pub tpm: &'a Tpm,
    pub cost: &'a C,
    pub gamma: f64,
    pub dt: f64,
    role: Role,
    /// TPM condition cell for each grid cell.
    tpm_cell: Vec<u32>,
    opponent: Vec<(f64, f64)>,
}

impl<'a, C: StageCost + ?Sized> Mdp<'a, C> {
    pub fn new(
        grid: &'a StateGrid,
        actions: &'a ActionSet,
        tpm: &'a Tpm,
        cost: &'a C,
        gamma: f64,
        dt: f64,
    ) -> Result<Self> {
        actions.validate()?;
        let role = tpm.role;
        match (role, actions.is_lateral()) {
            (Role::Lkv, true) => {
                return Err(Error::InvalidActionSet("LKV actions must be longitudinal only".into()))
            }
            (Role::Lcv, false) => {
                return Err(Error::InvalidActionSet("LCV actions need lateral values".into()))
            }
            _ => {}
        }
        if let Some(w) = cost.weights() {
            if w.role() != role {
                return Err(Error::RoleMismatch {
                    expected: role.to_string(),
                    found: w.role().to_string(),
                });
            }
        }
        if grid.condition_axes() != tpm.condition_axes {
            return Err(Error::GridMismatch {
                expected: format!("grid condition axes {}", hash::short(&condition_hash(grid))),
                found: format!("tpm condition axes {}", hash::short(&tpm.axes_hash())),
            });
        }
        let lens = tpm.cell_lens();
        let tpm_cell = (0..grid.n_cells())
            .map(|c| {
                let k = grid.unflatten(c);
                ((k[0] * lens[1] + k[1]) * lens[2] + k[2]) as u32
            })
            .collect();
        let opponent = tpm.opponent_actions.actions().collect();
        Ok(Self {
            grid,
            actions,
            tpm,
            cost,
            gamma,
            dt,
            role,
            tpm_cell,
            opponent,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn state(&self, cell: usize) -> RelativeState {
        RelativeState::from_array(self.grid.cell_center(cell))
    }

    pub fn stage_cost(&self, cell: usize, action: usize) -> f64 {
        self.cost.cost(&self.state(cell), self.actions.action(action))
    }

    /// Opponent distribution used at `cell`.
    pub fn opponent_row(&self, cell: usize) -> &[f64] {
        self.tpm.row(self.tpm_cell[cell] as usize)
    }

    /// Visit `(opponent probability, successor stencil)` for every opponent
    /// action with non-zero probability.
    #[inline]
    fn for_each_successor(&self, cell: usize, action: usize, stencil: &mut Stencil, mut f: impl FnMut(f64, &Stencil)) {
        let s = self.state(cell);
        let own = self.actions.action(action);
        for (&p, &opp) in self.opponent_row(cell).iter().zip(&self.opponent) {
            if p == 0.0 {
                continue;
            }
            let next = step_mdp(&s, own, opp, self.role, self.dt);
            self.grid.interp_into(next.to_array(), stencil);
            f(p, stencil);
        }
    }

    /// `g(s, a) + gamma * E_w[J(s')]`.
    pub fn expected_lookahead(&self, cell: usize, action: usize, value: &[f64]) -> f64 {
        let mut stencil = Stencil::default();
        self.lookahead_with(cell, action, value, &mut stencil)
    }

    #[inline]
    fn lookahead_with(&self, cell: usize, action: usize, value: &[f64], stencil: &mut Stencil) -> f64 {
        let g = self.stage_cost(cell, action);
        if self.gamma == 0.0 {
            return g;
        }
        let mut expect = 0.0;
        self.for_each_successor(cell, action, stencil, |p, st| {
            let v: f64 = st.as_slice().iter().map(|&(i, w)| w * value[i]).sum();
            expect += p * v;
        });
        g + self.gamma * expect
    }

    /// Merged sparse successor distribution of `(cell, action)`, sorted by index.
    pub fn successor_row(&self, cell: usize, action: usize) -> Vec<(usize, f64)> {
        let mut stencil = Stencil::default();
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(128);
        self.for_each_successor(cell, action, &mut stencil, |p, st| {
            row.extend(st.as_slice().iter().map(|&(i, w)| (i, p * w)));
        });
        row.sort_unstable_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (i, w) in row {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += w,
                _ => merged.push((i, w)),
            }
        }
        merged
    }

    /// Greedy action for every cell under `value`, ties broken toward the
    /// most comfortable action. Returns the actions and `min_a Q` per cell.
    pub fn greedy(&self, value: &[f64]) -> (Vec<u16>, Vec<f64>) {
        let order = self.actions.comfort_order();
        let out: Vec<(u16, f64)> = (0..self.n_cells())
            .into_par_iter()
            .map_init(Stencil::default, |st, c| {
                let q: Vec<f64> = (0..self.actions.len())
                    .map(|a| self.lookahead_with(c, a, value, st))
                    .collect();
                let min = q.iter().copied().fold(f64::INFINITY, f64::min);
                let best = order
                    .iter()
                    .copied()
                    .find(|&a| q[a] <= min + TIE_EPS)
                    .expect("non-empty action set");
                (best as u16, min)
            })
            .collect();
        out.into_iter().unzip()
    }

    /// Sup-norm Bellman optimality residual `max_c |min_a Q(c, a) - J(c)|`.
    pub fn bellman_residual(&self, value: &[f64]) -> f64 {
        let (_, qmin) = self.greedy(value);
        qmin.iter()
            .zip(value)
            .map(|(q, v)| (q - v).abs())
            .fold(0.0, f64::max)
    }
}

fn condition_hash(grid: &StateGrid) -> String {
    hash::json_hash(&grid.condition_axes())
}

/// Fixed-policy transition operator in compressed row form.
struct PolicyOperator {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    stage: Vec<f64>,
}

impl PolicyOperator {
    /// Rows are produced in parallel chunks and packed as they arrive, so
    /// peak memory stays close to the size of the final arrays.
    fn build<C: StageCost + ?Sized>(mdp: &Mdp<C>, policy: &[u16]) -> Self {
        const CHUNK: usize = 4096;
        let n = mdp.n_cells();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut stage = Vec::with_capacity(n);
        offsets.push(0);
        for start in (0..n).step_by(CHUNK) {
            let rows: Vec<(f64, Vec<(usize, f64)>)> = (start..(start + CHUNK).min(n))
                .into_par_iter()
                .map(|c| {
                    let a = policy[c] as usize;
                    (mdp.stage_cost(c, a), mdp.successor_row(c, a))
                })
                .collect();
            for (g, row) in rows {
                stage.push(g);
                for (i, w) in row {
                    cols.push(i as u32);
                    weights.push(w);
                }
                offsets.push(cols.len());
            }
        }
        cols.shrink_to_fit();
        weights.shrink_to_fit();
        Self {
            offsets,
            cols,
            weights,
            stage,
        }
    }

    /// `out = g + gamma * P * value`; returns the sup-norm change.
    fn apply(&self, gamma: f64, value: &[f64], out: &mut [f64]) -> f64 {
        out.par_iter_mut()
            .enumerate()
            .map(|(c, o)| {
                let (lo, hi) = (self.offsets[c], self.offsets[c + 1]);
                let mut acc = 0.0;
                for k in lo..hi {
                    acc += self.weights[k] * value[self.cols[k] as usize];
                }
                *o = self.stage[c] + gamma * acc;
                (*o - value[c]).abs()
            })
            .reduce(|| 0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub sweeps: usize,
    pub residual: f64,
}

fn evaluate_operator(
    op: &PolicyOperator,
    gamma: f64,
    cfg: &SolverConfig,
    value: &mut Vec<f64>,
) -> Result<EvalStats> {
    let mut next = vec![0.0; value.len()];
    let mut residual = f64::INFINITY;
    for sweep in 1..=cfg.max_eval_sweeps {
        residual = op.apply(gamma, value, &mut next);
        std::mem::swap(value, &mut next);
        if residual < cfg.eval_tol {
            return Ok(EvalStats { sweeps: sweep, residual });
        }
    }
    Err(Error::EvaluationDiverged {
        sweeps: cfg.max_eval_sweeps,
        residual,
    })
}

/// Iterative evaluation of a fixed policy, warm-started from `value`.
pub fn policy_evaluation<C: StageCost + ?Sized>(
    mdp: &Mdp<C>,
    policy: &[u16],
    cfg: &SolverConfig,
    value: &mut Vec<f64>,
) -> Result<EvalStats> {
    if policy.len() != mdp.n_cells() || value.len() != mdp.n_cells() {
        return Err(Error::InvalidParam("policy/value length does not match the grid".into()));
    }
    if policy.iter().any(|&a| a as usize >= mdp.actions.len()) {
        return Err(Error::InvalidParam("policy refers to an action outside the action set".into()));
    }
    let op = PolicyOperator::build(mdp, policy);
    evaluate_operator(&op, mdp.gamma, cfg, value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub gamma: f64,
    pub dt: f64,
    #[serde(default)]
    pub weights: Option<StageWeights>,
    #[serde(default)]
    pub weight_preset: Option<String>,
    pub weights_hash: String,
    pub tpm_hash: String,
    pub grid_hash: String,
    pub iterations: usize,
    pub eval_sweeps: usize,
    pub bellman_residual: f64,
}

/// Lookup-table policy for one role.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub role: Role,
    pub grid: StateGrid,
    pub actions: ActionSet,
    pub action_index: Vec<u16>,
    pub value: Vec<f64>,
    pub meta: PolicyMeta,
}

/// Progress of one policy-iteration step, passed to observers.
pub struct IterationReport<'a> {
    pub iteration: usize,
    pub policy: &'a [u16],
    pub value: &'a [f64],
    pub eval: EvalStats,
    pub changed: usize,
}

/// Solve by policy iteration.
pub fn policy_iteration<C: StageCost + ?Sized>(
    grid: &StateGrid,
    actions: &ActionSet,
    tpm: &Tpm,
    cost: &C,
    cfg: &SolverConfig,
) -> Result<Policy> {
    policy_iteration_observed(grid, actions, tpm, cost, cfg, |_| {})
}

/// Policy iteration with a callback after every evaluate-improve step.
///
/// Starts from the most comfortable action everywhere. An incumbent action
/// is only replaced when some action beats it by more than [`TIE_EPS`]; the
/// replacement is the most comfortable of the minimizers.
pub fn policy_iteration_observed<C: StageCost + ?Sized>(
    grid: &StateGrid,
    actions: &ActionSet,
    tpm: &Tpm,
    cost: &C,
    cfg: &SolverConfig,
    mut observe: impl FnMut(&IterationReport),
) -> Result<Policy> {
    cfg.validate()?;
    let mdp = Mdp::new(grid, actions, tpm, cost, cfg.gamma, cfg.dt)?;
    let n = mdp.n_cells();
    let order = actions.comfort_order();
    let mut policy = vec![order[0] as u16; n];
    let mut value = vec![0.0; n];
    let mut total_sweeps = 0;
    let mut last = EvalStats::default();
    let mut changed = n;

    for iteration in 1..=cfg.max_policy_iters {
        let op = PolicyOperator::build(&mdp, &policy);
        last = evaluate_operator(&op, mdp.gamma, cfg, &mut value)?;
        total_sweeps += last.sweeps;

        let improved: Vec<(u16, bool)> = (0..n)
            .into_par_iter()
            .map_init(Stencil::default, |st, c| {
                let q: Vec<f64> = (0..actions.len())
                    .map(|a| mdp.lookahead_with(c, a, &value, st))
                    .collect();
                let min = q.iter().copied().fold(f64::INFINITY, f64::min);
                let current = policy[c] as usize;
                if q[current] <= min + TIE_EPS {
                    return (current as u16, false);
                }
                let best = order
                    .iter()
                    .copied()
                    .find(|&a| q[a] <= min + TIE_EPS)
                    .expect("non-empty action set");
                (best as u16, true)
            })
            .collect();
        changed = improved.iter().filter(|e| e.1).count();
        observe(&IterationReport {
            iteration,
            policy: &policy,
            value: &value,
            eval: last,
            changed,
        });
        if changed == 0 {
            // Canonical tie-breaking: comfort-first among the minimizers.
            let (canonical, qmin) = mdp.greedy(&value);
            let residual = qmin
                .iter()
                .zip(&value)
                .map(|(q, v)| (q - v).abs())
                .fold(0.0, f64::max);
            return Ok(Policy {
                role: mdp.role(),
                grid: grid.clone(),
                actions: actions.clone(),
                action_index: canonical,
                value,
                meta: PolicyMeta {
                    gamma: cfg.gamma,
                    dt: cfg.dt,
                    weights: cost.weights(),
                    weight_preset: None,
                    weights_hash: cost.weights().map(|w| hash::json_hash(&w)).unwrap_or_default(),
                    tpm_hash: tpm.content_hash(),
                    grid_hash: hash::json_hash(grid),
                    iterations: iteration,
                    eval_sweeps: total_sweeps,
                    bellman_residual: residual,
                },
            });
        }
        policy = improved.into_iter().map(|e| e.0).collect();
    }
    Err(Error::IterationCap {
        iterations: cfg.max_policy_iters,
        residual: last.residual,
        changed,
    })
}

/// Bellman-optimality sweeps from `J = 0` until the sup-norm change drops
/// below `tol`. Returns the value table and the per-sweep residuals.
pub fn value_iteration_trace<C: StageCost + ?Sized>(
    mdp: &Mdp<C>,
    tol: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = mdp.n_cells();
    let mut value = vec![0.0; n];
    let mut residuals = Vec::new();
    loop {
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(Stencil::default, |st, c| {
                (0..mdp.actions.len())
                    .map(|a| mdp.lookahead_with(c, a, &value, st))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let r = next
            .iter()
            .zip(&value)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        value = next;
        residuals.push(r);
        if r < tol || mdp.gamma == 0.0 {
            return (value, residuals);
        }
    }
}

/// Value-iteration cross-check for the policy-iteration solver.
pub fn value_iteration_oracle<C: StageCost + ?Sized>(
    grid: &StateGrid,
    actions: &ActionSet,
    tpm: &Tpm,
    cost: &C,
    gamma: f64,
    dt: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let mdp = Mdp::new(grid, actions, tpm, cost, gamma, dt)?;
    Ok(value_iteration_trace(&mdp, tol).0)
}

/// Smallest horizon `H` with `gamma^H <= bound`.
pub fn horizon_for(gamma: f64, bound: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    (bound.ln() / gamma.ln()).ceil().max(1.0) as usize
}

/// Backward induction over `horizon` stages from a zero terminal cost. Every
/// `(cell, action)` successor distribution is tabulated once up front; no
/// convergence test, no policy.
pub fn finite_horizon_dp<C: StageCost + ?Sized>(mdp: &Mdp<C>, horizon: usize) -> Vec<f64> {
    let n = mdp.n_cells();
    let m = mdp.actions.len();
    let table: Vec<Vec<(f64, Vec<(usize, f64)>)>> = (0..n)
        .into_par_iter()
        .map(|c| (0..m).map(|a| (mdp.stage_cost(c, a), mdp.successor_row(c, a))).collect())
        .collect();
    let mut value = vec![0.0; n];
    for _ in 0..horizon {
        value = table
            .par_iter()
            .map(|rows| {
                rows.iter()
                    .map(|(g, row)| g + mdp.gamma * row.iter().map(|&(i, w)| w * value[i]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
    }
    value
}

impl Policy {
    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    /// Action of the nearest cell; total over all states.
    pub fn lookup_action(&self, s: &RelativeState) -> (f64, f64) {
        let c = self.grid.nearest_cell(s.to_array());
        self.actions.action(self.action_index[c] as usize)
    }

    pub fn lookup_index(&self, s: &RelativeState) -> usize {
        self.action_index[self.grid.nearest_cell(s.to_array())] as usize
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_cells();
        if self.action_index.len() != n || self.value.len() != n {
            return Err(Error::InvalidParam("policy tables do not match the grid".into()));
        }
        if self.action_index.iter().any(|&a| a as usize >= self.actions.len()) {
            return Err(Error::InvalidParam("policy action index out of range".into()));
        }
        let grid_hash = hash::json_hash(&self.grid);
        if self.meta.grid_hash != grid_hash {
            return Err(Error::GridMismatch {
                expected: hash::short(&self.meta.grid_hash).into(),
                found: hash::short(&grid_hash).into(),
            });
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = PolicyHeader {
            role: self.role,
            grid: self.grid.clone(),
            actions: self.actions.clone(),
            n_cells: self.n_cells(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(POLICY_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for &a in &self.action_index {
            w.write_all(&a.to_le_bytes())?;
        }
        for &v in &self.value {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_owned(),
            reason,
        };
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)?;
        if &magic != POLICY_MAGIC {
            return Err(bad("not a policy file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: PolicyHeader = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        let n = header.grid.n_cells();
        if header.n_cells != n {
            return Err(bad(format!("header claims {} cells, grid has {n}", header.n_cells)));
        }
        let mut buf = vec![0u8; n * 2];
        r.read_exact(&mut buf)?;
        let action_index = buf.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let value = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let policy = Policy {
            role: header.role,
            grid: header.grid,
            actions: header.actions,
            action_index,
            value,
            meta: header.meta,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file), path)
    }
}

/// Versioned magic prefix of policy files.
pub const POLICY_MAGIC: &[u8; 16] = b"COOPDRIVE-POL\x00v1";

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    role: Role,
    grid: StateGrid,
    actions: ActionSet,
    n_cells: usize,
    meta: PolicyMeta,
}

/// Per-cell node coordinates, handy for scans over a policy.
pub fn cell_states(grid: &StateGrid) -> impl Iterator<Item = RelativeState> + '_ {
    (0..grid.n_cells()).map(|c| {
        let p: [f64; DIMS] = grid.cell_center(c);
        RelativeState::from_array(p)
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::costs::CostFn;
    use crate::grid::AxisSpec;
    use crate::tpm::{self, synthetic};
    use nalgebra::{DMatrix, DVector};

    /// 5 x 3 x 5 x 3 x 5 = 1125 cells.
    pub(crate) fn small_grid() -> StateGrid {
        StateGrid::from_ranges([
            (-6.0, 6.0, 3.0),
            (-1.75, 1.75, 1.75),
            (-2.0, 2.0, 1.0),
            (-0.5, 0.5, 0.5),
            (-2.0, 2.0, 1.0),
        ])
    }

    pub(crate) fn learned_tpms(grid: &StateGrid) -> (Tpm, Tpm) {
        let cfg = synthetic::SyntheticConfig {
            encounters: 60,
            ..Default::default()
        };
        let sc = tpm::extract_interaction_scenarios(&synthetic::generate(&cfg), &Default::default()).unwrap();
        let lkv = tpm::build_tpm(&sc, Role::Lkv, grid.condition_axes(), ActionSet::lcv_default()).unwrap();
        let lcv = tpm::build_tpm(&sc, Role::Lcv, grid.condition_axes(), ActionSet::lkv_default()).unwrap();
        (tpm::smooth(&lkv, 1.0).unwrap(), tpm::smooth(&lcv, 1.0).unwrap())
    }

    fn tight() -> SolverConfig {
        SolverConfig {
            eval_tol: 1e-10,
            ..Default::default()
        }
    }

    fn zero_point_mass(grid: &StateGrid, role: Role) -> Tpm {
        let opp = match role {
            Role::Lkv => ActionSet::lcv_default(),
            Role::Lcv => ActionSet::lkv_default(),
        };
        let z = opp.zero_action();
        Tpm::point_mass(role, grid.condition_axes(), opp, z).unwrap()
    }

    #[test]
    fn myopic_lookahead_is_stage_cost() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let w = StageWeights::neutral(Role::Lkv);
        let acts = ActionSet::lkv_default();
        let mdp = Mdp::new(&grid, &acts, &t, &w, 0.0, 0.5).unwrap();
        let value: Vec<f64> = (0..grid.n_cells()).map(|c| c as f64).collect();
        for c in (0..grid.n_cells()).step_by(37) {
            for a in 0..acts.len() {
                assert_eq!(mdp.expected_lookahead(c, a, &value), mdp.stage_cost(c, a));
            }
        }
    }

    #[test]
    fn point_mass_on_grid_successor() {
        let grid = small_grid();
        let t = zero_point_mass(&grid, Role::Lkv);
        let w = StageWeights::neutral(Role::Lkv);
        let acts = ActionSet::lkv_default();
        let mdp = Mdp::new(&grid, &acts, &t, &w, 0.95, 0.5).unwrap();
        // Zero relative velocity and zero actions keep the state in place.
        let c = grid.cell_index([1, 2, 2, 1, 3]).unwrap();
        let value: Vec<f64> = (0..grid.n_cells()).map(|i| (i as f64).sqrt()).collect();
        let a = acts.zero_action();
        let expect = mdp.stage_cost(c, a) + 0.95 * value[c];
        assert_eq!(mdp.expected_lookahead(c, a, &value), expect);
    }

    #[test]
    fn hand_backup_on_toy_grid() {
        // Two points on x and vx, degenerate elsewhere would be invalid, so
        // use two points on every axis: 32 cells.
        let grid = StateGrid::from_ranges([
            (0.0, 1.0, 1.0),
            (0.0, 1.0, 1.0),
            (0.0, 1.0, 1.0),
            (0.0, 1.0, 1.0),
            (0.0, 1.0, 1.0),
        ]);
        let acts = ActionSet::new(vec![0.0, 1.0], vec![]).unwrap();
        let t = zero_point_mass(&grid, Role::Lkv);
        let cost = CostFn(|s: &RelativeState, a: (f64, f64)| s.x_rel + 10.0 * a.0);
        let mdp = Mdp::new(&grid, &acts, &t, &cost, 0.5, 0.5).unwrap();
        let value: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let idx = |k: [usize; 5]| grid.cell_index(k).unwrap();
        let c = idx([0, 0, 1, 0, 0]);
        // a = 0: x -> 0.5, vx stays 1: halfway between x = 0 and x = 1.
        let q0 = 0.0 + 0.5 * (0.5 * value[idx([0, 0, 1, 0, 0])] + 0.5 * value[idx([1, 0, 1, 0, 0])]);
        // a = 1 (own LKV accel): x -> 0.5, vx -> 0.5, v_int -> 0.5: 8 corners at 1/8.
        let mut corners = 0.0;
        for i in 0..2 {
            for k in 0..2 {
                for m in 0..2 {
                    corners += value[idx([i, 0, k, 0, m])] / 8.0;
                }
            }
        }
        let q1 = 10.0 + 0.5 * corners;
        assert!((mdp.expected_lookahead(c, 0, &value) - q0).abs() < 1e-12);
        assert!((mdp.expected_lookahead(c, 1, &value) - q1).abs() < 1e-12);
        let (greedy, qmin) = mdp.greedy(&value);
        assert_eq!(greedy[c] as usize, if q0 <= q1 { 0 } else { 1 });
        assert!((qmin[c] - q0.min(q1)).abs() < 1e-12);
    }

    #[test]
    fn constant_cost_is_geometric_series() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let acts = ActionSet::lkv_default();
        let g = 0.3;
        let cost = CostFn(move |_: &RelativeState, _: (f64, f64)| g);
        let cfg = tight();
        let mdp = Mdp::new(&grid, &acts, &t, &cost, cfg.gamma, cfg.dt).unwrap();
        let mut value = vec![0.0; grid.n_cells()];
        let policy = vec![acts.zero_action() as u16; grid.n_cells()];
        policy_evaluation(&mdp, &policy, &cfg, &mut value).unwrap();
        for v in &value {
            assert!((v - 20.0 * g).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn zero_cost_has_zero_value() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let acts = ActionSet::lkv_default();
        let cost = CostFn(|_: &RelativeState, _: (f64, f64)| 0.0);
        let p = policy_iteration(&grid, &acts, &t, &cost, &tight()).unwrap();
        assert!(p.value.iter().all(|&v| v == 0.0));
        assert_eq!(p.meta.iterations, 1);
    }

    #[test]
    fn evaluation_matches_direct_linear_solve() {
        let grid = small_grid();
        let (_, t) = learned_tpms(&grid);
        let acts = ActionSet::lcv_default();
        let w = StageWeights::neutral(Role::Lcv);
        let cfg = SolverConfig {
            eval_tol: 1e-13,
            ..Default::default()
        };
        let mdp = Mdp::new(&grid, &acts, &t, &w, cfg.gamma, cfg.dt).unwrap();
        let n = grid.n_cells();
        let policy: Vec<u16> = (0..n).map(|c| ((c * 7) % acts.len()) as u16).collect();

        let mut a = DMatrix::<f64>::identity(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for c in 0..n {
            let act = policy[c] as usize;
            g[c] = mdp.stage_cost(c, act);
            for (j, p) in mdp.successor_row(c, act) {
                a[(c, j)] -= cfg.gamma * p;
            }
        }
        let direct = a.lu().solve(&g).expect("nonsingular");

        let mut value = vec![0.0; n];
        policy_evaluation(&mdp, &policy, &cfg, &mut value).unwrap();
        for c in 0..n {
            assert!((value[c] - direct[c]).abs() < 1e-9, "cell {c}: {} vs {}", value[c], direct[c]);
        }
    }

    #[test]
    fn successor_rows_are_distributions() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let acts = ActionSet::lkv_default();
        let w = StageWeights::neutral(Role::Lkv);
        let mdp = Mdp::new(&grid, &acts, &t, &w, 0.95, 0.5).unwrap();
        for c in (0..grid.n_cells()).step_by(13) {
            for a in 0..acts.len() {
                let row = mdp.successor_row(c, a);
                let s: f64 = row.iter().map(|e| e.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            }
        }
    }

    #[test]
    fn single_action_converges_in_one_pass() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let acts = ActionSet::new(vec![0.0], vec![]).unwrap();
        let w = StageWeights::neutral(Role::Lkv);
        let p = policy_iteration(&grid, &acts, &t, &w, &SolverConfig::default()).unwrap();
        assert_eq!(p.meta.iterations, 1);
        assert!(p.action_index.iter().all(|&a| a == 0));
    }

    fn pi_vs_vi(role: Role, agg: f64) {
        let grid = small_grid();
        let (t_lkv, t_lcv) = learned_tpms(&grid);
        let (t, acts) = match role {
            Role::Lkv => (t_lkv, ActionSet::lkv_default()),
            Role::Lcv => (t_lcv, ActionSet::lcv_default()),
        };
        let w = StageWeights::neutral(role).with_agg(agg);
        let cfg = tight();
        let p = policy_iteration(&grid, &acts, &t, &w, &cfg).unwrap();
        let vi = value_iteration_oracle(&grid, &acts, &t, &w, cfg.gamma, cfg.dt, 1e-10).unwrap();
        let gap = p.value.iter().zip(&vi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-5, "|J_PI - J_VI| = {gap:e}");
        let mdp = Mdp::new(&grid, &acts, &t, &w, cfg.gamma, cfg.dt).unwrap();
        let (vi_policy, _) = mdp.greedy(&vi);
        assert_eq!(vi_policy, p.action_index);
        assert!(p.meta.bellman_residual < 10.0 * cfg.eval_tol);
    }

    #[test]
    fn policy_iteration_matches_value_iteration_lkv() {
        pi_vs_vi(Role::Lkv, 0.0);
        pi_vs_vi(Role::Lkv, 0.02);
    }

    #[test]
    fn policy_iteration_matches_value_iteration_lcv() {
        pi_vs_vi(Role::Lcv, -0.02);
    }

    #[test]
    fn successive_policies_do_not_get_worse() {
        let grid = small_grid();
        let (_, t) = learned_tpms(&grid);
        let acts = ActionSet::lcv_default();
        let w = StageWeights::neutral(Role::Lcv);
        let mut history: Vec<Vec<f64>> = Vec::new();
        let p = policy_iteration_observed(&grid, &acts, &t, &w, &tight(), |r| history.push(r.value.to_vec())).unwrap();
        assert!(history.len() >= 2);
        assert_eq!(history.len(), p.meta.iterations);
        for pair in history.windows(2) {
            for (new, old) in pair[1].iter().zip(&pair[0]) {
                assert!(*new <= old + 1e-9);
            }
        }
    }

    #[test]
    fn greedy_consistency_and_lookup_scan() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let acts = ActionSet::lkv_default();
        let w = StageWeights::neutral(Role::Lkv);
        let cfg = SolverConfig::default();
        let p = policy_iteration(&grid, &acts, &t, &w, &cfg).unwrap();
        let mdp = Mdp::new(&grid, &acts, &t, &w, cfg.gamma, cfg.dt).unwrap();
        for c in 0..grid.n_cells() {
            let q = mdp.expected_lookahead(c, p.action_index[c] as usize, &p.value);
            let best = (0..acts.len())
                .map(|a| mdp.expected_lookahead(c, a, &p.value))
                .fold(f64::INFINITY, f64::min);
            assert!(q <= best + 1e-9);
            let s = RelativeState::from_array(grid.cell_center(c));
            assert_eq!(p.lookup_index(&s), p.action_index[c] as usize);
        }
        // Far outside the grid clamps to the corner cell.
        let far = RelativeState::new(1e3, -1e3, 1e3, -1e3, 1e3);
        let k = [4, 0, 4, 0, 4];
        assert_eq!(p.lookup_index(&far), p.action_index[grid.cell_index(k).unwrap()] as usize);
    }

    #[test]
    fn value_iteration_contracts() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let acts = ActionSet::lkv_default();
        let w = StageWeights::neutral(Role::Lkv);
        let mdp = Mdp::new(&grid, &acts, &t, &w, 0.95, 0.5).unwrap();
        let (_, res) = value_iteration_trace(&mdp, 1e-9);
        for pair in res.windows(2) {
            assert!(pair[1] <= 0.95 * pair[0] + 1e-12);
        }
    }

    #[test]
    fn finite_horizon_matches_policy_iteration() {
        assert_eq!(horizon_for(0.95, 1e-8), 360);
        let grid = small_grid();
        let (_, t) = learned_tpms(&grid);
        let acts = ActionSet::lcv_default();
        let w = StageWeights::neutral(Role::Lcv);
        let p = policy_iteration(&grid, &acts, &t, &w, &tight()).unwrap();
        let mdp = Mdp::new(&grid, &acts, &t, &w, 0.95, 0.5).unwrap();
        let fh = finite_horizon_dp(&mdp, horizon_for(0.95, 1e-8));
        let gap = p.value.iter().zip(&fh).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-5, "{gap:e}");
        // One stage is the myopic minimum.
        let one = finite_horizon_dp(&mdp, 1);
        assert_eq!(one[7], (0..acts.len()).map(|a| mdp.stage_cost(7, a)).fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn myopic_value_iteration_is_min_stage_cost() {
        let grid = small_grid();
        let (_, t) = learned_tpms(&grid);
        let acts = ActionSet::lcv_default();
        let w = StageWeights::neutral(Role::Lcv);
        let vi = value_iteration_oracle(&grid, &acts, &t, &w, 0.0, 0.5, 1e-9).unwrap();
        let mdp = Mdp::new(&grid, &acts, &t, &w, 0.0, 0.5).unwrap();
        for (c, v) in vi.iter().enumerate() {
            let m = (0..acts.len()).map(|a| mdp.stage_cost(c, a)).fold(f64::INFINITY, f64::min);
            assert_eq!(*v, m);
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let acts = ActionSet::lkv_default();
        let w = StageWeights::neutral(Role::Lkv).with_agg(0.02);
        let solve = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| policy_iteration(&grid, &acts, &t, &w, &SolverConfig::default()).unwrap())
        };
        assert_eq!(solve(1).to_bytes(), solve(4).to_bytes());
    }

    #[test]
    fn policy_file_round_trip() {
        let grid = small_grid();
        let (_, t) = learned_tpms(&grid);
        let acts = ActionSet::lcv_default();
        let w = StageWeights::neutral(Role::Lcv);
        let p = policy_iteration(&grid, &acts, &t, &w, &SolverConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lcv.pol");
        p.save(&path).unwrap();
        let back = Policy::load(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), p.to_bytes());

        let mut bytes = p.to_bytes();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Policy::load(&path), Err(Error::Format { .. })));
        let short = &p.to_bytes()[..100];
        std::fs::write(&path, short).unwrap();
        assert!(Policy::load(&path).is_err());
    }

    #[test]
    fn mismatched_tpm_grid_is_rejected() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let w = StageWeights::neutral(Role::Lkv);
        let err = policy_iteration(&StateGrid::desk(), &ActionSet::lkv_default(), &t, &w, &SolverConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::GridMismatch { .. }));
        let lcv_w = StageWeights::neutral(Role::Lcv);
        let err = policy_iteration(&grid, &ActionSet::lkv_default(), &t, &lcv_w, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::RoleMismatch { .. }));
        let err = policy_iteration(&grid, &ActionSet::lcv_default(), &t, &w, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidActionSet(_)));
    }

    #[test]
    fn iteration_cap_is_an_error() {
        let grid = small_grid();
        let (t, _) = learned_tpms(&grid);
        let w = StageWeights::neutral(Role::Lkv);
        let cfg = SolverConfig {
            max_policy_iters: 0,
            ..Default::default()
        };
        let err = policy_iteration(&grid, &ActionSet::lkv_default(), &t, &w, &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidParam(_)));
        let cfg = SolverConfig {
            max_policy_iters: 1,
            ..Default::default()
        };
        let err = policy_iteration(&grid, &ActionSet::lkv_default(), &t, &w, &cfg).unwrap_err();
        assert!(matches!(err, Error::IterationCap { .. }));
        let cfg = SolverConfig {
            max_eval_sweeps: 2,
            ..Default::default()
        };
        let err = policy_iteration(&grid, &ActionSet::lkv_default(), &t, &w, &cfg).unwrap_err();
        assert!(matches!(err, Error::EvaluationDiverged { .. }));
    }

    #[test]
    fn tpm_rows_constructor_checks_shape() {
        let axes = small_grid().condition_axes();
        let n: usize = axes.iter().map(AxisSpec::len).product();
        let rows = vec![vec![0.2; 5]; n];
        assert!(Tpm::from_rows(Role::Lcv, axes.clone(), ActionSet::lkv_default(), &rows).is_ok());
        assert!(Tpm::from_rows(Role::Lcv, axes.clone(), ActionSet::lkv_default(), &rows[1..]).is_err());
        let bad = vec![vec![0.5; 5]; n];
        assert!(Tpm::from_rows(Role::Lcv, axes, ActionSet::lkv_default(), &bad).is_err());
    }
}
