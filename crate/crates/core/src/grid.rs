//! Quantized state and action spaces.
//!
//! The state grid is a dense five-axis lattice over
//! `(x_rel, y_rel, vx_rel, vy_rel, v_intention)`. Cells are flattened in
//! row-major order, first axis slowest. Everything here clamps out-of-range
//! values onto the lattice so that policy lookup is a total function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of state dimensions.
pub const DIMS: usize = 5;

/// Maximum number of entries returned by multilinear interpolation.
pub const MAX_CORNERS: usize = 1 << DIMS;

const WHOLE_TOL: f64 = 1e-9;
const SNAP_TOL: f64 = 1e-9;

/// Canonical axis names, in grid order.
pub const AXIS_NAMES: [&str; DIMS] = ["x_rel", "y_rel", "vx_rel", "vy_rel", "v_intention"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl AxisSpec {
    pub fn new(name: impl Into<String>, lo: f64, hi: f64, step: f64) -> Result<Self> {
        let axis = Self {
            name: name.into(),
            lo,
            hi,
            step,
        };
        axis.validate()?;
        Ok(axis)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidAxis {
            axis: self.name.clone(),
            reason,
        };
        if !(self.lo.is_finite() && self.hi.is_finite() && self.step.is_finite()) {
            return Err(bad("bounds and step must be finite".into()));
        }
        if self.hi <= self.lo {
            return Err(bad(format!("hi ({}) must exceed lo ({})", self.hi, self.lo)));
        }
        if self.step <= 0.0 {
            return Err(bad(format!("step ({}) must be positive", self.step)));
        }
        let intervals = (self.hi - self.lo) / self.step;
        if (intervals - intervals.round()).abs() > WHOLE_TOL {
            return Err(bad(format!(
                "(hi - lo) / step = {intervals} is not a whole number"
            )));
        }
        Ok(())
    }

    /// Number of grid points on this axis.
    pub fn len(&self) -> usize {
        ((self.hi - self.lo) / self.step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of grid point `i`. The last point is exactly `hi`.
    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.len() {
            self.hi
        } else {
            self.lo + i as f64 * self.step
        }
    }

    /// Nearest grid point index. Exact midpoints go to the larger index.
    pub fn quantize(&self, value: f64) -> usize {
        let last = self.len() - 1;
        if value.is_nan() || value <= self.lo {
            return 0;
        }
        if value >= self.hi {
            return last;
        }
        let t = (value - self.lo) / self.step;
        ((t + 0.5).floor() as usize).min(last)
    }

    /// Lower bracketing index and fractional position toward the next node,
    /// after clamping. `frac == 0` means the value sits on a node.
    pub fn bracket(&self, value: f64) -> (usize, f64) {
        let last = self.len() - 1;
        if value.is_nan() || value <= self.lo {
            return (0, 0.0);
        }
        if value >= self.hi {
            return (last, 0.0);
        }
        let t = (value - self.lo) / self.step;
        let nearest = t.round();
        if (t - nearest).abs() < SNAP_TOL {
            return ((nearest as usize).min(last), 0.0);
        }
        let i0 = (t.floor() as usize).min(last - 1);
        (i0, t - i0 as f64)
    }

    /// Clamp a value into `[lo, hi]`.
    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.lo, self.hi)
    }
}

/// Five-axis state lattice in fixed order `(x_rel, y_rel, vx_rel, vy_rel, v_intention)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AxisSpec>", into = "Vec<AxisSpec>")]
pub struct StateGrid {
    axes: [AxisSpec; DIMS],
    #[serde(skip)]
    lens: [usize; DIMS],
    #[serde(skip)]
    strides: [usize; DIMS],
}

impl TryFrom<Vec<AxisSpec>> for StateGrid {
    type Error = Error;

    fn try_from(axes: Vec<AxisSpec>) -> Result<Self> {
        let n = axes.len();
        let axes: [AxisSpec; DIMS] = axes.try_into().map_err(|_| Error::InvalidAxis {
            axis: "grid".into(),
            reason: format!("expected {DIMS} axes, got {n}"),
        })?;
        Self::new(axes)
    }
}

impl From<StateGrid> for Vec<AxisSpec> {
    fn from(grid: StateGrid) -> Self {
        grid.axes.into()
    }
}

impl StateGrid {
    pub fn new(axes: [AxisSpec; DIMS]) -> Result<Self> {
        for axis in &axes {
            axis.validate()?;
        }
        let lens = std::array::from_fn(|d| axes[d].len());
        let mut strides = [1usize; DIMS];
        for d in (0..DIMS - 1).rev() {
            strides[d] = strides[d + 1] * lens[d + 1];
        }
        Ok(Self {
            axes,
            lens,
            strides,
        })
    }

    /// Full-resolution grid.
    pub fn full() -> Self {
        Self::from_ranges([
            (-30.0, 30.0, 2.0),
            (-3.5, 3.5, 0.5),
            (-10.0, 10.0, 1.0),
            (-2.0, 2.0, 0.5),
            (-5.0, 5.0, 1.0),
        ])
    }

    /// Coarse grid (at most 9 points per axis) for fast solves and tests.
    pub fn desk() -> Self {
        Self::from_ranges([
            (-24.0, 24.0, 6.0),
            (-3.5, 3.5, 0.875),
            (-4.0, 4.0, 1.0),
            (-1.0, 1.0, 0.5),
            (-4.0, 4.0, 1.0),
        ])
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown grid preset `{other}` (expected `desk` or `full`)"
            ))),
        }
    }

    /// Build from `(lo, hi, step)` triples using the canonical axis names.
    ///
    /// Panics if any triple is invalid; intended for compile-time presets.
    pub fn from_ranges(ranges: [(f64, f64, f64); DIMS]) -> Self {
        let axes = std::array::from_fn(|d| {
            let (lo, hi, step) = ranges[d];
            AxisSpec::new(AXIS_NAMES[d], lo, hi, step).expect("valid preset axis")
        });
        Self::new(axes).expect("valid preset grid")
    }

    pub fn axes(&self) -> &[AxisSpec; DIMS] {
        &self.axes
    }

    pub fn axis(&self, d: usize) -> &AxisSpec {
        &self.axes[d]
    }

    pub fn lens(&self) -> [usize; DIMS] {
        self.lens
    }

    pub fn n_cells(&self) -> usize {
        self.lens.iter().product()
    }

    /// The three conditioning axes `(x_rel, y_rel, vx_rel)` used by the opponent model.
    pub fn condition_axes(&self) -> [AxisSpec; 3] {
        [
            self.axes[0].clone(),
            self.axes[1].clone(),
            self.axes[2].clone(),
        ]
    }

    pub fn cell_index(&self, coords: [usize; DIMS]) -> Result<usize> {
        let mut idx = 0;
        for d in 0..DIMS {
            if coords[d] >= self.lens[d] {
                return Err(Error::IndexOutOfRange {
                    axis: self.axes[d].name.clone(),
                    index: coords[d],
                    len: self.lens[d],
                });
            }
            idx += coords[d] * self.strides[d];
        }
        Ok(idx)
    }

    #[inline]
    fn flat(&self, coords: &[usize; DIMS]) -> usize {
        coords
            .iter()
            .zip(self.strides.iter())
            .map(|(c, s)| c * s)
            .sum()
    }

    pub fn coords_of(&self, index: usize) -> Result<[usize; DIMS]> {
        if index >= self.n_cells() {
            return Err(Error::IndexOutOfRange {
                axis: "cell".into(),
                index,
                len: self.n_cells(),
            });
        }
        Ok(self.unflatten(index))
    }

    #[inline]
    pub(crate) fn unflatten(&self, mut index: usize) -> [usize; DIMS] {
        let mut coords = [0; DIMS];
        for d in 0..DIMS {
            coords[d] = index / self.strides[d];
            index %= self.strides[d];
        }
        coords
    }

    /// Coordinates of the node at `index`. Panics if out of range.
    pub fn cell_center(&self, index: usize) -> [f64; DIMS] {
        let coords = self.unflatten(index);
        std::array::from_fn(|d| self.axes[d].value(coords[d]))
    }

    pub fn quantize(&self, point: [f64; DIMS]) -> [usize; DIMS] {
        std::array::from_fn(|d| self.axes[d].quantize(point[d]))
    }

    /// Flat index of the nearest node.
    pub fn nearest_cell(&self, point: [f64; DIMS]) -> usize {
        self.flat(&self.quantize(point))
    }

    /// Multilinear interpolation stencil for `point` (clamped per axis).
    pub fn interp_weights(&self, point: [f64; DIMS]) -> Vec<(usize, f64)> {
        let mut stencil = Stencil::default();
        self.interp_into(point, &mut stencil);
        stencil.as_slice().to_vec()
    }

    /// Allocation-free variant of [`interp_weights`](Self::interp_weights).
    pub fn interp_into(&self, point: [f64; DIMS], out: &mut Stencil) {
        out.len = 1;
        out.entries[0] = (0, 1.0);
        for d in 0..DIMS {
            let (i0, frac) = self.axes[d].bracket(point[d]);
            let stride = self.strides[d];
            let n = out.len;
            if frac == 0.0 {
                for e in &mut out.entries[..n] {
                    e.0 += i0 * stride;
                }
            } else {
                for k in 0..n {
                    let (idx, w) = out.entries[k];
                    out.entries[k] = (idx + i0 * stride, w * (1.0 - frac));
                    out.entries[n + k] = (idx + (i0 + 1) * stride, w * frac);
                }
                out.len = 2 * n;
            }
        }
    }
}

/// Fixed-capacity interpolation stencil.
#[derive(Clone, Debug)]
pub struct Stencil {
    entries: [(usize, f64); MAX_CORNERS],
    len: usize,
}

impl Default for Stencil {
    fn default() -> Self {
        Self {
            entries: [(0, 0.0); MAX_CORNERS],
            len: 0,
        }
    }
}

impl Stencil {
    pub fn as_slice(&self) -> &[(usize, f64)] {
        &self.entries[..self.len]
    }
}

/// Discrete acceleration sets for one vehicle.
///
/// For a lane-keeping vehicle `ay_values` is empty and the action index is the
/// index into `ax_values`. For a lane-changing vehicle the index is
/// `ix * ay_values.len() + iy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub ax_values: Vec<f64>,
    #[serde(default)]
    pub ay_values: Vec<f64>,
}

impl ActionSet {
    pub fn new(ax_values: Vec<f64>, ay_values: Vec<f64>) -> Result<Self> {
        let set = Self {
            ax_values,
            ay_values,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ax_values.is_empty() {
            return Err(Error::InvalidActionSet("ax list is empty".into()));
        }
        for (name, values) in [("ax", &self.ax_values), ("ay", &self.ay_values)] {
            if values.is_empty() {
                continue;
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidActionSet(format!("{name} has non-finite values")));
            }
            if values.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidActionSet(format!(
                    "{name} values must be strictly increasing"
                )));
            }
            if !values.contains(&0.0) {
                return Err(Error::InvalidActionSet(format!("{name} must contain 0")));
            }
        }
        Ok(())
    }

    /// Default longitudinal-only set.
    pub fn lkv_default() -> Self {
        Self {
            ax_values: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            ay_values: Vec::new(),
        }
    }

    /// Default longitudinal x lateral set.
    pub fn lcv_default() -> Self {
        Self {
            ax_values: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            ay_values: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
        }
    }

    pub fn is_lateral(&self) -> bool {
        !self.ay_values.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ax_values.len() * self.ay_values.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(ax, ay)` for action `i`; `ay` is 0 for longitudinal-only sets.
    pub fn action(&self, i: usize) -> (f64, f64) {
        if self.ay_values.is_empty() {
            (self.ax_values[i], 0.0)
        } else {
            let n = self.ay_values.len();
            (self.ax_values[i / n], self.ay_values[i % n])
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.len()).map(|i| self.action(i))
    }

    /// Index of the nearest action to `(ax, ay)`.
    pub fn nearest(&self, ax: f64, ay: f64) -> usize {
        let ix = nearest_in(&self.ax_values, ax);
        if self.ay_values.is_empty() {
            ix
        } else {
            ix * self.ay_values.len() + nearest_in(&self.ay_values, ay)
        }
    }

    /// Index of the zero action.
    pub fn zero_action(&self) -> usize {
        self.nearest(0.0, 0.0)
    }

    /// Action indices sorted by comfort: smaller `|ax|` first, then smaller
    /// `|ay|`, then smaller values. Used for deterministic tie-breaking.
    pub fn comfort_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let (ax_a, ay_a) = self.action(a);
            let (ax_b, ay_b) = self.action(b);
            ax_a.abs()
                .total_cmp(&ax_b.abs())
                .then(ay_a.abs().total_cmp(&ay_b.abs()))
                .then(ax_a.total_cmp(&ax_b))
                .then(ay_a.total_cmp(&ay_b))
        });
        order
    }

    pub fn ax_span(&self) -> f64 {
        self.ax_values[self.ax_values.len() - 1] - self.ax_values[0]
    }

    pub fn clamp_ax(&self, ax: f64) -> f64 {
        ax.clamp(self.ax_values[0], self.ax_values[self.ax_values.len() - 1])
    }

    pub fn clamp_ay(&self, ay: f64) -> f64 {
        match (self.ay_values.first(), self.ay_values.last()) {
            (Some(lo), Some(hi)) => ay.clamp(*lo, *hi),
            _ => 0.0,
        }
    }
}

/// Nearest value index; ties go to the larger index.
pub(crate) fn nearest_in(values: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &x) in values.iter().enumerate() {
        let d = (x - v).abs();
        if d <= best_d {
            best = i;
            best_d = d;
        }
    }
    best
}
