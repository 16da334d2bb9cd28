use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_metrics, run_episode, Agent, MetricsReport, NoiseSpec, Scenario, SimTrace};
use crate::error::Result;

/// km/h to m/s.
pub const KPH: f64 = 1.0 / 3.6;

/// Near-collision starts plus observation noise.
pub const HARSH_NOISE: NoiseSpec = NoiseSpec {
    sigma_pos: 0.5,
    sigma_vel: 0.3,
    initial_gap_shrink: 2.0,
};

/// Randomized initial conditions of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDraw {
    pub x_lkv: f64,
    pub x_lcv: f64,
    pub vx_lkv: f64,
    pub vx_lcv: f64,
}

/// Initial positions U(-5, 5) m and speeds U(32.8, 47.2) km/h per vehicle,
/// from the stream `(seed, episode)`. Harsh noise redraws the LCV position
/// as the LKV position plus U(-g, g).
pub fn draw_episode(base: &Scenario, seed: u64, episode: u64) -> (Scenario, EpisodeDraw) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    let x_lkv = rng.random_range(-5.0..5.0);
    let mut x_lcv = rng.random_range(-5.0..5.0);
    let vx_lkv = rng.random_range(32.8..47.2) * KPH;
    let vx_lcv = rng.random_range(32.8..47.2) * KPH;
    let shrink = base.noise.map_or(0.0, |n| n.initial_gap_shrink);
    if shrink > 0.0 {
        x_lcv = x_lkv + rng.random_range(-shrink..shrink);
    }
    let noise_seed: u64 = rng.random();
    let mut s = base.clone();
    s.lkv_init.x = base.lkv_init.x + x_lkv;
    s.lcv_init.x = base.lkv_init.x + x_lcv;
    s.lkv_init.vx = vx_lkv;
    s.lcv_init.vx = vx_lcv;
    s.seed = noise_seed;
    (
        s,
        EpisodeDraw {
            x_lkv,
            x_lcv,
            vx_lkv,
            vx_lcv,
        },
    )
}

/// Run one seeded episode with target speeds equal to the drawn speeds.
pub fn run_drawn(lkv: &Agent, lcv: &Agent, base: &Scenario, seed: u64, episode: u64) -> Result<SimTrace> {
    let (scenario, draw) = draw_episode(base, seed, episode);
    let lkv = lkv.clone().with_v0(draw.vx_lkv);
    let lcv = lcv.clone().with_v0(draw.vx_lcv);
    run_episode(&lkv, &lcv, &scenario)
}

/// Run `n` seeded episodes (in parallel) and aggregate them. Results do not
/// depend on scheduling: each episode owns its random stream and the traces
/// are reduced in episode order.
pub fn monte_carlo(lkv: &Agent, lcv: &Agent, n: usize, base: &Scenario, seed: u64) -> Result<MetricsReport> {
    let traces = monte_carlo_traces(lkv, lcv, n, base, seed)?;
    compute_metrics(&traces, seed)
}

pub fn monte_carlo_traces(lkv: &Agent, lcv: &Agent, n: usize, base: &Scenario, seed: u64) -> Result<Vec<SimTrace>> {
    base.validate()?;
    (0..n as u64)
        .into_par_iter()
        .map(|e| run_drawn(lkv, lcv, base, seed, e))
        .collect()
}
