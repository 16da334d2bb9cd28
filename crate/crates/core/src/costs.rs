//! Stage costs for both roles: safety, comfort, intention and character.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::RelativeState;
use crate::Role;

/// Floor on the weighted distance in the safety term, in metres.
pub const EPS_SAFE: f64 = 0.5;

/// Default safety weights: the ellipse `SAFE_X x^2 + SAFE_Y y^2 = 1` passes
/// close to the corner of the 4.8 m x 1.8 m collision box, so every
/// overlapping state costs at least about 1 while a vehicle side by side in
/// the next lane costs about 0.7.
pub const SAFE_X: f64 = 0.02;
pub const SAFE_Y: f64 = 0.15;

/// Character weight magnitude used by the `aggressive` / `conservative` presets.
pub const PRESET_AGG: f64 = 0.02;

#[inline]
fn safety(wx: f64, wy: f64, s: &RelativeState) -> f64 {
    let d = (wx * s.x_rel * s.x_rel + wy * s.y_rel * s.y_rel).sqrt();
    1.0 / d.max(EPS_SAFE)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LkvWeights {
    pub alpha_safe_x: f64,
    pub alpha_safe_y: f64,
    pub alpha_conf: f64,
    pub alpha_int: f64,
    pub alpha_agg: f64,
}

impl Default for LkvWeights {
    fn default() -> Self {
        Self {
            alpha_safe_x: SAFE_X,
            alpha_safe_y: SAFE_Y,
            alpha_conf: 0.1,
            alpha_int: 0.05,
            alpha_agg: 0.0,
        }
    }
}

impl LkvWeights {
    pub fn with_agg(self, alpha_agg: f64) -> Self {
        Self { alpha_agg, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let magnitudes = [
            self.alpha_safe_x,
            self.alpha_safe_y,
            self.alpha_conf,
            self.alpha_int,
        ];
        check_weights(&magnitudes, self.alpha_agg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcvWeights {
    pub beta_safe_x: f64,
    pub beta_safe_y: f64,
    pub beta_conf_x: f64,
    pub beta_conf_y: f64,
    pub beta_int: f64,
    pub beta_lc: f64,
    pub beta_agg: f64,
}

impl Default for LcvWeights {
    fn default() -> Self {
        Self {
            beta_safe_x: SAFE_X,
            beta_safe_y: SAFE_Y,
            beta_conf_x: 0.1,
            beta_conf_y: 0.1,
            beta_int: 0.05,
            beta_lc: 0.02,
            beta_agg: 0.0,
        }
    }
}

impl LcvWeights {
    pub fn with_agg(self, beta_agg: f64) -> Self {
        Self { beta_agg, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let magnitudes = [
            self.beta_safe_x,
            self.beta_safe_y,
            self.beta_conf_x,
            self.beta_conf_y,
            self.beta_int,
            self.beta_lc,
        ];
        check_weights(&magnitudes, self.beta_agg)
    }
}

fn check_weights(magnitudes: &[f64], agg: f64) -> Result<()> {
    if !agg.is_finite() || magnitudes.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidParam("cost weights must be finite".into()));
    }
    if magnitudes.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidParam(
            "safety, comfort, intention and lane-change weights must be non-negative".into(),
        ));
    }
    Ok(())
}

pub fn stage_cost_lkv(s: &RelativeState, a_x: f64, w: &LkvWeights) -> f64 {
    safety(w.alpha_safe_x, w.alpha_safe_y, s)
        + w.alpha_conf * a_x * a_x
        + w.alpha_int * s.v_intention * s.v_intention
        + w.alpha_agg * s.x_rel
}

pub fn stage_cost_lcv(s: &RelativeState, a_x: f64, a_y: f64, w: &LcvWeights) -> f64 {
    safety(w.beta_safe_x, w.beta_safe_y, s)
        + w.beta_conf_x * a_x * a_x
        + w.beta_conf_y * a_y * a_y
        + w.beta_int * s.v_intention * s.v_intention
        + w.beta_lc * s.y_rel * s.y_rel
        + w.beta_agg * -s.x_rel
}

/// Role-tagged weight profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum StageWeights {
    Lkv(LkvWeights),
    Lcv(LcvWeights),
}

impl StageWeights {
    pub fn role(&self) -> Role {
        match self {
            StageWeights::Lkv(_) => Role::Lkv,
            StageWeights::Lcv(_) => Role::Lcv,
        }
    }

    /// Named preset: `neutral`, `aggressive` or `conservative`.
    pub fn preset(role: Role, name: &str) -> Result<Self> {
        let agg = match name {
            "neutral" => 0.0,
            "aggressive" => PRESET_AGG,
            "conservative" => -PRESET_AGG,
            other => {
                return Err(Error::Config(format!(
                    "unknown weight preset `{other}` (expected neutral, aggressive or conservative)"
                )))
            }
        };
        Ok(Self::neutral(role).with_agg(agg))
    }

    pub fn neutral(role: Role) -> Self {
        match role {
            Role::Lkv => StageWeights::Lkv(LkvWeights::default()),
            Role::Lcv => StageWeights::Lcv(LcvWeights::default()),
        }
    }

    /// Same profile with a different character weight.
    pub fn with_agg(self, agg: f64) -> Self {
        match self {
            StageWeights::Lkv(w) => StageWeights::Lkv(w.with_agg(agg)),
            StageWeights::Lcv(w) => StageWeights::Lcv(w.with_agg(agg)),
        }
    }

    pub fn agg(&self) -> f64 {
        match self {
            StageWeights::Lkv(w) => w.alpha_agg,
            StageWeights::Lcv(w) => w.beta_agg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StageWeights::Lkv(w) => w.validate(),
            StageWeights::Lcv(w) => w.validate(),
        }
    }

    /// Stage cost of taking own action `(ax, ay)` in `s`.
    #[inline]
    pub fn cost(&self, s: &RelativeState, action: (f64, f64)) -> f64 {
        match self {
            StageWeights::Lkv(w) => stage_cost_lkv(s, action.0, w),
            StageWeights::Lcv(w) => stage_cost_lcv(s, action.0, action.1, w),
        }
    }
}

/// A stage-cost function usable by the solver.
pub trait StageCost: Sync {
    fn cost(&self, s: &RelativeState, action: (f64, f64)) -> f64;

    /// The weight profile behind this cost, if it is one.
    fn weights(&self) -> Option<StageWeights> {
        None
    }
}

impl StageCost for StageWeights {
    #[inline]
    fn cost(&self, s: &RelativeState, action: (f64, f64)) -> f64 {
        StageWeights::cost(self, s, action)
    }

    fn weights(&self) -> Option<StageWeights> {
        Some(*self)
    }
}

/// Adapter for ad-hoc cost closures.
pub struct CostFn<F>(pub F);

impl<F> StageCost for CostFn<F>
where
    F: Fn(&RelativeState, (f64, f64)) -> f64 + Sync,
{
    fn cost(&self, s: &RelativeState, action: (f64, f64)) -> f64 {
        (self.0)(s, action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_lkv() -> LkvWeights {
        LkvWeights {
            alpha_safe_x: 0.0,
            alpha_safe_y: 0.0,
            alpha_conf: 0.0,
            alpha_int: 0.0,
            alpha_agg: 0.0,
        }
    }

    fn zero_lcv() -> LcvWeights {
        LcvWeights {
            beta_safe_x: 0.0,
            beta_safe_y: 0.0,
            beta_conf_x: 0.0,
            beta_conf_y: 0.0,
            beta_int: 0.0,
            beta_lc: 0.0,
            beta_agg: 0.0,
        }
    }

    #[test]
    fn lkv_three_four_five() {
        let w = LkvWeights {
            alpha_safe_x: 1.0,
            alpha_safe_y: 1.0,
            ..zero_lkv()
        };
        let s = RelativeState::new(3.0, 4.0, 0.0, 0.0, 1.0);
        assert!((stage_cost_lkv(&s, 2.0, &w) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn lkv_zero_comfort_and_intention() {
        let w = LkvWeights {
            alpha_safe_x: 0.0,
            alpha_safe_y: 0.0,
            ..LkvWeights::default()
        };
        let s = RelativeState::new(10.0, 0.0, 0.0, 0.0, 0.0);
        // Only the (clamped) safety term survives with zero safety weights.
        assert_eq!(stage_cost_lkv(&s, 0.0, &w), 1.0 / EPS_SAFE);
    }

    #[test]
    fn safety_clamp_at_origin() {
        let s = RelativeState::default();
        let c = stage_cost_lkv(&s, 0.0, &LkvWeights::default());
        assert_eq!(c, 1.0 / EPS_SAFE);
        assert!(stage_cost_lcv(&s, 0.0, 0.0, &LcvWeights::default()).is_finite());
    }

    #[test]
    fn lcv_examples() {
        let w = LcvWeights {
            beta_safe_x: 1.0,
            beta_safe_y: 1.0,
            ..LcvWeights::default()
        }
        .with_agg(0.0);
        let s = RelativeState::new(5.0, 0.0, 0.0, 0.0, 0.0);
        assert!((stage_cost_lcv(&s, 0.0, 0.0, &w) - 0.2).abs() < 1e-15);

        // Lane-change term alone; the safety term is constant (clamped) with
        // zero safety weights and is subtracted out.
        let w = LcvWeights {
            beta_lc: 1.0,
            ..zero_lcv()
        };
        let s = RelativeState::new(0.0, 2.5, 0.0, 0.0, 0.0);
        assert!((stage_cost_lcv(&s, 0.0, 0.0, &w) - 1.0 / EPS_SAFE - 6.25).abs() < 1e-12);
    }

    #[test]
    fn character_antisymmetry() {
        let w = LcvWeights::default().with_agg(0.3);
        let a = RelativeState::new(7.0, 1.0, 0.5, 0.0, 0.2);
        let b = RelativeState { x_rel: -7.0, ..a };
        let base = LcvWeights { beta_agg: 0.0, ..w };
        let char_a = stage_cost_lcv(&a, 1.0, 0.5, &w) - stage_cost_lcv(&a, 1.0, 0.5, &base);
        let char_b = stage_cost_lcv(&b, 1.0, 0.5, &w) - stage_cost_lcv(&b, 1.0, 0.5, &base);
        assert!((char_a + char_b).abs() < 1e-12);
        assert!((char_a - (-0.3 * 7.0)).abs() < 1e-12);
    }

    #[test]
    fn presets() {
        let a = StageWeights::preset(Role::Lcv, "aggressive").unwrap();
        assert_eq!(a.agg(), PRESET_AGG);
        assert_eq!(StageWeights::preset(Role::Lkv, "conservative").unwrap().agg(), -PRESET_AGG);
        assert!(StageWeights::preset(Role::Lkv, "reckless").is_err());
        let bad = LkvWeights {
            alpha_conf: -1.0,
            ..LkvWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn safety_decreasing_then_flat(d1 in 0.0..20.0f64, d2 in 0.0..20.0f64) {
            let w = LkvWeights { alpha_safe_x: 1.0, alpha_safe_y: 1.0, ..zero_lkv() };
            let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let c = |d: f64| stage_cost_lkv(&RelativeState::new(d, 0.0, 0.0, 0.0, 0.0), 0.0, &w);
            if far > EPS_SAFE && far > near + 1e-9 {
                prop_assert!(c(far) < c(near));
            } else if far <= EPS_SAFE {
                prop_assert_eq!(c(far), c(near));
            }
        }

        #[test]
        fn non_negative_without_character(
            s in proptest::array::uniform5(-30.0..30.0f64), ax in -3.0..3.0f64, ay in -1.0..1.0f64,
        ) {
            let s = RelativeState::from_array(s);
            prop_assert!(stage_cost_lkv(&s, ax, &LkvWeights::default()) >= 0.0);
            prop_assert!(stage_cost_lcv(&s, ax, ay, &LcvWeights::default()) >= 0.0);
        }

        #[test]
        fn character_shifts_argmin(
            x1 in -30.0..30.0f64, x2 in -30.0..30.0f64, lo in -0.1..0.1f64, hi in -0.1..0.1f64,
        ) {
            // Two candidate relative positions that differ only in x_rel, with the
            // safety term switched off so only the character term separates them.
            prop_assume!((x1 - x2).abs() > 1e-6);
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let (small, large) = if x1 < x2 { (x1, x2) } else { (x2, x1) };
            let cands = [small, large];
            let pick = |cost: &dyn Fn(f64) -> f64| -> f64 {
                if cost(cands[0]) <= cost(cands[1]) { cands[0] } else { cands[1] }
            };
            let lkv = |agg: f64| move |x: f64| {
                let w = LkvWeights { alpha_agg: agg, ..zero_lkv() };
                stage_cost_lkv(&RelativeState::new(x, 0.0, 0.0, 0.0, 0.0), 0.0, &w)
            };
            let lcv = |agg: f64| move |x: f64| {
                let w = LcvWeights { beta_agg: agg, ..zero_lcv() };
                stage_cost_lcv(&RelativeState::new(x, 0.0, 0.0, 0.0, 0.0), 0.0, 0.0, &w)
            };
            // Larger alpha_agg: LKV prefers smaller x_rel (LKV further ahead).
            prop_assert!(pick(&lkv(hi)) <= pick(&lkv(lo)));
            // Larger beta_agg: LCV prefers larger x_rel (LCV further ahead).
            prop_assert!(pick(&lcv(hi)) >= pick(&lcv(lo)));
        }
    }
}
