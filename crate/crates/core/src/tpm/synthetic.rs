//! Deterministic synthetic lane-change corpus.
//!
//! Each encounter scripts one lane-changing vehicle and the lane keeper in
//! its target lane. Interactive encounters are either an overtake (the LCV
//! accelerates and merges ahead while the LKV backs off) or a yield (the LCV
//! drops back and merges behind while the LKV speeds past). Passive
//! encounters merge into a large gap with no speed change and are meant to be
//! rejected by the interaction filter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::TrajectoryRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncounterKind {
    Overtake,
    Yield,
    Passive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub encounters: usize,
    pub seed: u64,
    /// Sample period, seconds.
    pub dt: f64,
    /// Length of each encounter, seconds.
    pub duration: f64,
    /// Standard deviation of the additive acceleration noise, m/s^2.
    pub accel_noise: f64,
    /// Probability that an interactive encounter is an overtake.
    pub aggressiveness: f64,
    pub passive_fraction: f64,
    pub lane_width: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            encounters: 240,
            seed: 2024,
            dt: 0.1,
            duration: 14.0,
            accel_noise: 0.15,
            aggressiveness: 0.5,
            passive_fraction: 0.15,
            lane_width: 3.5,
        }
    }
}

/// Fully specified encounter. Accelerations are magnitudes; signs follow
/// from `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncounterScript {
    pub kind: EncounterKind,
    /// +1 when the LCV starts to the left (larger y) of the target lane.
    pub side: f64,
    pub lkv_speed: f64,
    pub lcv_speed: f64,
    /// Initial `x_lcv - x_lkv`.
    pub dx0: f64,
    pub lcv_accel: f64,
    pub lcv_accel_start: f64,
    pub lcv_accel_duration: f64,
    pub lkv_accel: f64,
    pub lkv_accel_start: f64,
    pub lkv_accel_duration: f64,
    /// Longitudinal gap the LCV waits for before merging.
    pub merge_gap: f64,
    /// Passive encounters merge at this time regardless of gap.
    pub merge_time: f64,
    pub merge_duration: f64,
}

impl EncounterScript {
    pub fn sample<R: Rng>(kind: EncounterKind, rng: &mut R) -> Self {
        let base = rng.random_range(9.5..12.5);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let jitter = Normal::new(0.0, 0.3).expect("valid normal");
        let lkv_speed = base + jitter.sample(rng);
        let lcv_speed = base + jitter.sample(rng);
        let passive = kind == EncounterKind::Passive;
        let dx0 = if passive {
            let d: f64 = rng.random_range(25.0..40.0);
            if rng.random_bool(0.5) {
                d
            } else {
                -d
            }
        } else {
            rng.random_range(-8.0..8.0)
        };
        let mag = |rng: &mut R, lo: f64, hi: f64| if passive { 0.0 } else { rng.random_range(lo..hi) };
        let lcv_accel = mag(rng, 0.8, 2.2);
        let lkv_accel = mag(rng, 0.8, 2.0);
        let lcv_accel_start = rng.random_range(0.3..1.5);
        Self {
            kind,
            side,
            lkv_speed,
            lcv_speed,
            dx0,
            lcv_accel,
            lcv_accel_start,
            lcv_accel_duration: rng.random_range(2.0..4.0),
            lkv_accel,
            lkv_accel_start: lcv_accel_start + rng.random_range(0.4..1.0),
            lkv_accel_duration: rng.random_range(1.5..3.5),
            merge_gap: rng.random_range(3.0..9.0),
            merge_time: rng.random_range(1.0..3.0),
            merge_duration: rng.random_range(3.0..5.0),
        }
    }
}

/// Lane id for lateral position `y` (target lane centred on 0 is lane 2).
pub fn lane_of(y: f64, lane_width: f64) -> i64 {
    (y / lane_width).round() as i64 + 2
}

/// Generate the corpus described by `cfg`.
pub fn generate(cfg: &SyntheticConfig) -> Vec<TrajectoryRecord> {
    let kinds: Vec<EncounterKind> = (0..cfg.encounters)
        .map(|e| {
            let mut rng = encounter_rng(cfg.seed, e as u64, 0);
            if rng.random_bool(cfg.passive_fraction.clamp(0.0, 1.0)) {
                EncounterKind::Passive
            } else if rng.random_bool(cfg.aggressiveness.clamp(0.0, 1.0)) {
                EncounterKind::Overtake
            } else {
                EncounterKind::Yield
            }
        })
        .collect();
    generate_kinds(cfg, &kinds)
}

/// Generate one encounter per entry of `kinds`, with randomized parameters.
pub fn generate_kinds(cfg: &SyntheticConfig, kinds: &[EncounterKind]) -> Vec<TrajectoryRecord> {
    let scripts: Vec<EncounterScript> = kinds
        .iter()
        .enumerate()
        .map(|(e, &kind)| EncounterScript::sample(kind, &mut encounter_rng(cfg.seed, e as u64, 1)))
        .collect();
    generate_scripts(cfg, &scripts)
}

/// Render explicit scripts. Encounter `e` uses vehicle ids `2e + 1` (LKV) and
/// `2e + 2` (LCV) and occupies its own time slot so encounters never overlap.
pub fn generate_scripts(cfg: &SyntheticConfig, scripts: &[EncounterScript]) -> Vec<TrajectoryRecord> {
    let mut lkv_rows = Vec::new();
    let mut lcv_rows = Vec::new();
    for (e, script) in scripts.iter().enumerate() {
        let mut rng = encounter_rng(cfg.seed, e as u64, 2);
        let t_offset = e as f64 * (cfg.duration + 10.0).ceil();
        let (lkv, lcv) = render(cfg, script, &mut rng);
        let ids = (2 * e as u64 + 1, 2 * e as u64 + 2);
        let n = lkv.len();
        let mut lk = Vec::with_capacity(n);
        let mut lc = Vec::with_capacity(n);
        for k in 0..n {
            let t = t_offset + k as f64 * cfg.dt;
            lk.push(TrajectoryRecord {
                vehicle_id: ids.0,
                t,
                lane_id: lane_of(lkv[k].1, cfg.lane_width),
                x: lkv[k].0,
                y: lkv[k].1,
                vx: lkv[k].2,
                vy: lkv[k].3,
            });
            lc.push(TrajectoryRecord {
                vehicle_id: ids.1,
                t,
                lane_id: lane_of(lcv[k].1, cfg.lane_width),
                x: lcv[k].0,
                y: lcv[k].1,
                vx: lcv[k].2,
                vy: lcv[k].3,
            });
        }
        lkv_rows.push(lk);
        lcv_rows.push(lc);
    }
    let mut out = Vec::new();
    for (lk, lc) in lkv_rows.into_iter().zip(lcv_rows) {
        out.extend(lk);
        out.extend(lc);
    }
    out
}

fn encounter_rng(seed: u64, encounter: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(encounter * 4 + purpose);
    rng
}

type Sample = (f64, f64, f64, f64);

fn render(cfg: &SyntheticConfig, s: &EncounterScript, rng: &mut ChaCha8Rng) -> (Vec<Sample>, Vec<Sample>) {
    let noise = Normal::new(0.0, cfg.accel_noise.max(0.0)).expect("valid normal");
    let steps = (cfg.duration / cfg.dt).round() as usize + 1;
    let (lcv_sign, lkv_sign) = match s.kind {
        EncounterKind::Overtake => (1.0, -1.0),
        EncounterKind::Yield => (-1.0, 1.0),
        EncounterKind::Passive => (0.0, 0.0),
    };
    let y_start = s.side * cfg.lane_width;

    let (mut lkv_x, mut lkv_vx) = (0.0, s.lkv_speed);
    let (mut lcv_x, mut lcv_vx) = (s.dx0, s.lcv_speed);
    let mut merge_start: Option<f64> = None;
    let mut lkv = Vec::with_capacity(steps);
    let mut lcv = Vec::with_capacity(steps);

    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        if merge_start.is_none() {
            let gap = lcv_x - lkv_x;
            let ready = match s.kind {
                EncounterKind::Overtake => gap >= s.merge_gap,
                EncounterKind::Yield => gap <= -s.merge_gap,
                EncounterKind::Passive => t >= s.merge_time,
            };
            if ready || t >= 0.6 * cfg.duration {
                merge_start = Some(t);
            }
        }
        let (y, vy) = match merge_start {
            Some(t0) => merge_profile(y_start, (t - t0) / s.merge_duration, s.merge_duration),
            None => (y_start, 0.0),
        };
        lkv.push((lkv_x, 0.0, lkv_vx, 0.0));
        lcv.push((lcv_x, y, lcv_vx, vy));

        let phase = |start: f64, dur: f64| t >= start && t < start + dur;
        let relax = |v: f64, target: f64| (-0.5 * (v - target)).clamp(-1.0, 1.0);
        let a_lcv = if phase(s.lcv_accel_start, s.lcv_accel_duration) {
            lcv_sign * s.lcv_accel
        } else if t >= s.lcv_accel_start + s.lcv_accel_duration {
            relax(lcv_vx, s.lcv_speed)
        } else {
            0.0
        };
        let a_lkv = if phase(s.lkv_accel_start, s.lkv_accel_duration) {
            lkv_sign * s.lkv_accel
        } else if t >= s.lkv_accel_start + s.lkv_accel_duration {
            relax(lkv_vx, s.lkv_speed)
        } else {
            0.0
        };
        let a_lcv = a_lcv + noise.sample(rng);
        let a_lkv = a_lkv + noise.sample(rng);
        lkv_x += lkv_vx * cfg.dt;
        lcv_x += lcv_vx * cfg.dt;
        lkv_vx = (lkv_vx + a_lkv * cfg.dt).max(0.0);
        lcv_vx = (lcv_vx + a_lcv * cfg.dt).max(0.0);
    }
    (lkv, lcv)
}

/// Raised-cosine lateral move from `y_start` to 0. `tau` is normalized time.
fn merge_profile(y_start: f64, tau: f64, duration: f64) -> (f64, f64) {
    let tau = tau.clamp(0.0, 1.0);
    let pi = std::f64::consts::PI;
    let y = y_start * (1.0 + (pi * tau).cos()) / 2.0;
    let vy = if tau > 0.0 && tau < 1.0 {
        -y_start * pi / (2.0 * duration) * (pi * tau).sin()
    } else {
        0.0
    };
    (y, vy)
}
