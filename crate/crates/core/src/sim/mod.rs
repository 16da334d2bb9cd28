//! Closed-loop two-vehicle episodes.
//!
//! Every `dt_plan` each agent observes the relative state (noisy in harsh
//! mode), picks accelerations, and holds them while the world integrates at
//! `dt_sim`. The live duet server drives the same [`EpisodeRunner`], so a
//! logged session replays bit-exactly through [`run_episode`].

mod agent;
mod export;
mod metrics;
pub mod monte_carlo;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use agent::{Agent, AgentConfig, Controller, ControllerSpec, ScriptSegment, ScriptedProfile};
pub use export::{read_trace_csv, write_trace_csv, TRACE_COLUMNS};
pub use metrics::{compute_metrics, lane_change_time, MetricsReport, VehicleMetrics};
pub use monte_carlo::{draw_episode, monte_carlo, monte_carlo_traces, run_drawn, EpisodeDraw, HARSH_NOISE, KPH};

use crate::error::{Error, Result};
use crate::interaction::{observe, step_world, ActionPair, RelativeState, VehicleState};
use crate::Role;

/// Default footprint, m.
pub const VEHICLE_LENGTH: f64 = crate::baselines::VEHICLE_LENGTH;
pub const VEHICLE_WIDTH: f64 = 1.8;
pub const LANE_WIDTH: f64 = 3.5;

/// Observation noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Std of the position noise, m.
    pub sigma_pos: f64,
    /// Std of the velocity noise, m/s.
    pub sigma_vel: f64,
    /// When positive, Monte Carlo draws the initial longitudinal offset
    /// `x_lcv - x_lkv` from U(-v, v) instead of independent positions, m.
    pub initial_gap_shrink: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let v = [self.sigma_pos, self.sigma_vel, self.initial_gap_shrink];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidParam("noise magnitudes must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_pos == 0.0 && self.sigma_vel == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub lkv_init: VehicleState,
    pub lcv_init: VehicleState,
    pub lane_width: f64,
    pub lcv_target_lane_y: f64,
    /// Episode length, s.
    pub duration: f64,
    pub dt_sim: f64,
    pub dt_plan: f64,
    pub noise: Option<NoiseSpec>,
    pub seed: u64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self::side_by_side(11.0)
    }
}

impl Scenario {
    /// Both vehicles side by side at the same speed, the LCV one lane to
    /// the left of its target lane.
    pub fn side_by_side(speed: f64) -> Self {
        Self {
            lkv_init: VehicleState::new(0.0, 0.0, speed, 0.0),
            lcv_init: VehicleState::new(0.0, LANE_WIDTH, speed, 0.0),
            lane_width: LANE_WIDTH,
            lcv_target_lane_y: 0.0,
            duration: 20.0,
            dt_sim: 0.1,
            dt_plan: 0.5,
            noise: None,
            seed: 0,
            vehicle_length: VEHICLE_LENGTH,
            vehicle_width: VEHICLE_WIDTH,
        }
    }

    /// Same scenario reflected across the LKV's lane centre.
    pub fn mirrored(&self) -> Self {
        let mut s = self.clone();
        let y0 = self.lkv_init.y;
        s.lcv_init.y = 2.0 * y0 - self.lcv_init.y;
        s.lcv_init.vy = -self.lcv_init.vy;
        s.lcv_target_lane_y = 2.0 * y0 - self.lcv_target_lane_y;
        s
    }

    pub fn n_steps(&self) -> usize {
        (self.duration / self.dt_sim).round() as usize
    }

    pub fn plan_every(&self) -> usize {
        (self.dt_plan / self.dt_sim).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_sim > 0.0 && self.dt_plan > 0.0 && self.duration > 0.0) {
            return Err(Error::InvalidParam("durations and time steps must be positive".into()));
        }
        let ratio = self.dt_plan / self.dt_sim;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!(
                "dt_plan ({}) must be an integer multiple of dt_sim ({})",
                self.dt_plan, self.dt_sim
            )));
        }
        let steps = self.duration / self.dt_sim;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(Error::InvalidParam("duration must be a whole number of dt_sim steps".into()));
        }
        let offset = (self.lcv_init.y - self.lcv_target_lane_y).abs();
        if (offset - self.lane_width).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!(
                "the LCV must start one lane width ({}) from its target lane, got {offset}",
                self.lane_width
            )));
        }
        if self.lkv_init.vy != 0.0 {
            return Err(Error::InvalidParam("the LKV cannot have lateral velocity".into()));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        let all = [
            self.lkv_init.x,
            self.lkv_init.y,
            self.lkv_init.vx,
            self.lcv_init.x,
            self.lcv_init.y,
            self.lcv_init.vx,
            self.lcv_init.vy,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("initial states must be finite".into()));
        }
        Ok(())
    }
}

/// Axis-aligned footprint overlap (strict).
pub fn detect_collision(lkv: &VehicleState, lcv: &VehicleState, length: f64, width: f64) -> bool {
    (lcv.x - lkv.x).abs() < length && (lcv.y - lkv.y).abs() < width
}

/// Add zero-mean Gaussian noise to the relative positions and velocities.
/// `v_intention` is the observer's own quantity and stays exact.
pub fn apply_sensor_noise<R: rand::Rng + ?Sized>(obs: &RelativeState, noise: &NoiseSpec, rng: &mut R) -> RelativeState {
    if noise.is_zero() {
        return *obs;
    }
    let mut draw = |sigma: f64| {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
        } else {
            0.0
        }
    };
    RelativeState {
        x_rel: obs.x_rel + draw(noise.sigma_pos),
        y_rel: obs.y_rel + draw(noise.sigma_pos),
        vx_rel: obs.vx_rel + draw(noise.sigma_vel),
        vy_rel: obs.vy_rel + draw(noise.sigma_vel),
        v_intention: obs.v_intention,
    }
}

/// One integration step: states at the start of the step and the
/// accelerations held over it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub lkv: VehicleState,
    pub lcv: VehicleState,
    pub a_lkv_x: f64,
    pub a_lcv_x: f64,
    pub a_lcv_y: f64,
    /// Observations made at this step (equal to the last ones between
    /// planning ticks).
    pub obs_lkv: RelativeState,
    pub obs_lcv: RelativeState,
    /// Latched: true from the first overlapping state on.
    pub collision: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub dt_sim: f64,
    pub dt_plan: f64,
    pub v0_lkv: f64,
    pub v0_lcv: f64,
    pub target_lane_y: f64,
    pub records: Vec<StepRecord>,
    /// States after the last step.
    pub final_lkv: VehicleState,
    pub final_lcv: VehicleState,
    pub collision: bool,
    /// Time of the first overlapping state.
    pub collision_time: Option<f64>,
    /// Start of the final stretch with `|y_rel| <= 0.2 m`.
    pub lane_change_time: Option<f64>,
    /// The IDM saw a closed gap at some point.
    pub emergency: bool,
}

impl SimTrace {
    /// `x_lkv - x_lcv` at the end of the episode.
    pub fn final_lead_of_lkv(&self) -> f64 {
        self.final_lkv.x - self.final_lcv.x
    }

    /// Commanded accelerations at each planning tick: `(lkv_ax, lcv_ax)`.
    pub fn plan_commands(&self) -> Vec<(f64, f64)> {
        let every = ((self.dt_plan / self.dt_sim).round() as usize).max(1);
        self.records
            .iter()
            .step_by(every)
            .map(|r| (r.a_lkv_x, r.a_lcv_x))
            .collect()
    }
}

/// Commands for externally controlled agents for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct External {
    pub lkv: Option<(f64, f64)>,
    pub lcv: Option<(f64, f64)>,
}

/// Stepwise episode driver.
pub struct EpisodeRunner {
    scenario: Scenario,
    lkv_agent: Agent,
    lcv_agent: Agent,
    lkv: VehicleState,
    lcv: VehicleState,
    step: usize,
    n_steps: usize,
    plan_every: usize,
    held: ActionPair,
    obs: (RelativeState, RelativeState),
    noise_rng: [ChaCha8Rng; 2],
    records: Vec<StepRecord>,
    collision_time: Option<f64>,
    emergency: bool,
}

impl EpisodeRunner {
    pub fn new(mut lkv: Agent, mut lcv: Agent, scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        lkv.reset();
        lcv.reset();
        lkv.check_role(Role::Lkv)?;
        lcv.check_role(Role::Lcv)?;
        let noise_rng = [0u64, 1].map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
            rng.set_stream(stream);
            rng
        });
        let (lkv_state, lcv_state) = (scenario.lkv_init, scenario.lcv_init);
        let collided = detect_collision(&lkv_state, &lcv_state, scenario.vehicle_length, scenario.vehicle_width);
        Ok(Self {
            scenario: scenario.clone(),
            n_steps: scenario.n_steps(),
            plan_every: scenario.plan_every(),
            lkv_agent: lkv,
            lcv_agent: lcv,
            lkv: lkv_state,
            lcv: lcv_state,
            step: 0,
            held: ActionPair::new(0.0, 0.0, 0.0),
            obs: (RelativeState::default(), RelativeState::default()),
            noise_rng,
            records: Vec::new(),
            collision_time: collided.then_some(0.0),
            emergency: false,
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.scenario.dt_sim
    }

    pub fn states(&self) -> (VehicleState, VehicleState) {
        (self.lkv, self.lcv)
    }

    pub fn collided(&self) -> bool {
        self.collision_time.is_some()
    }

    pub fn finished(&self) -> bool {
        self.collided() || self.step >= self.n_steps
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn agents(&self) -> (&Agent, &Agent) {
        (&self.lkv_agent, &self.lcv_agent)
    }

    /// Accelerations currently held.
    pub fn held(&self) -> ActionPair {
        self.held
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    fn observe_noisy(&mut self, role: Role) -> RelativeState {
        let agent = match role {
            Role::Lkv => &self.lkv_agent,
            Role::Lcv => &self.lcv_agent,
        };
        let clean = observe(role, &self.lkv, &self.lcv, agent.v0);
        match &self.scenario.noise {
            Some(n) => {
                let rng = &mut self.noise_rng[role as usize];
                apply_sensor_noise(&clean, n, rng)
            }
            None => clean,
        }
    }

    /// Advance one `dt_sim` step. Returns the record of the step, or `None`
    /// when the episode is already over.
    pub fn step(&mut self, ext: External) -> Option<StepRecord> {
        if self.finished() {
            return None;
        }
        let t = self.time();
        if self.step % self.plan_every == 0 {
            let obs_lkv = self.observe_noisy(Role::Lkv);
            let obs_lcv = self.observe_noisy(Role::Lcv);
            let ctx = agent::DecisionContext {
                t,
                plan_index: self.step / self.plan_every,
                dt_plan: self.scenario.dt_plan,
                lane_width: self.scenario.lane_width,
                target_lane_y: self.scenario.lcv_target_lane_y,
            };
            let lkv_cmd = self.lkv_agent.decide(&self.lkv, &obs_lkv, ext.lkv, &ctx);
            let lcv_cmd = self.lcv_agent.decide(&self.lcv, &obs_lcv, ext.lcv, &ctx);
            self.emergency |= lkv_cmd.emergency || lcv_cmd.emergency;
            self.held = ActionPair::new(lkv_cmd.ax, lcv_cmd.ax, lcv_cmd.ay);
            self.obs = (obs_lkv, obs_lcv);
        }
        let rec = StepRecord {
            t,
            lkv: self.lkv,
            lcv: self.lcv,
            a_lkv_x: self.held.a_lkv_x,
            a_lcv_x: self.held.a_lcv_x,
            a_lcv_y: self.held.a_lcv_y,
            obs_lkv: self.obs.0,
            obs_lcv: self.obs.1,
            collision: false,
        };
        self.records.push(rec);
        let (lkv, lcv) = step_world(&self.lkv, &self.lcv, &self.held, self.scenario.dt_sim);
        self.lkv = lkv;
        self.lcv = lcv;
        self.step += 1;
        if detect_collision(&lkv, &lcv, self.scenario.vehicle_length, self.scenario.vehicle_width) {
            self.collision_time = Some(self.time());
        }
        Some(rec)
    }

    pub fn into_trace(self) -> SimTrace {
        let t_end = self.time();
        let mut records = self.records;
        if let Some(tc) = self.collision_time {
            for r in records.iter_mut() {
                r.collision = r.t >= tc - 1e-9;
            }
        }
        let target = self.scenario.lcv_target_lane_y;
        let lane_change_time = lane_change_time(&records, &self.lcv, target, t_end);
        SimTrace {
            dt_sim: self.scenario.dt_sim,
            dt_plan: self.scenario.dt_plan,
            v0_lkv: self.lkv_agent.v0,
            v0_lcv: self.lcv_agent.v0,
            target_lane_y: target,
            records,
            final_lkv: self.lkv,
            final_lcv: self.lcv,
            collision: self.collision_time.is_some(),
            collision_time: self.collision_time,
            lane_change_time,
            emergency: self.emergency,
        }
    }
}

/// Run one full episode. The trace ends early on collision.
pub fn run_episode(lkv: &Agent, lcv: &Agent, scenario: &Scenario) -> Result<SimTrace> {
    let mut runner = EpisodeRunner::new(lkv.clone(), lcv.clone(), scenario)?;
    while runner.step(External::default()).is_some() {}
    Ok(runner.into_trace())
}
