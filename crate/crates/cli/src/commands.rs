use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use coopdrive_core::config::{Config, GridConfig, WeightsConfig};
use coopdrive_core::costs::StageWeights;
use coopdrive_core::hash;
use coopdrive_core::sdp::{policy_iteration_observed, Mdp};
use coopdrive_core::sim::{
    compute_metrics, monte_carlo, run_episode, write_trace_csv, Agent, Controller, MetricsReport, Scenario,
    ScriptedProfile, SimTrace, HARSH_NOISE,
};
use coopdrive_core::tpm::{self, Tpm};
use coopdrive_core::{reference, Policy, Role};
use coopdrive_duet as duet;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref(), cli.preset)?;
    let config = cli.config.as_deref();
    match cli.command {
        Command::Tpm(TpmCommand::Build(a)) => tpm_build(&cfg, config, &a).map(|_| ()),
        Command::Solve(a) => solve(&cfg, config, &a).map(|_| ()),
        Command::Sim(a) => sim(&cfg, config, &a).map(|_| ()),
        Command::Eval(a) => eval(&cfg, config, &a).map(|_| ()),
        Command::Serve(a) => serve(&a),
    }
}

pub fn load_config(path: Option<&Path>, preset: Option<GridPreset>) -> CliResult<Config> {
    let mut cfg = match path {
        Some(p) if !p.exists() => return Err(CliError::Validation(format!("config file {} not found", p.display()))),
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(p) = preset {
        cfg.grid = GridConfig {
            preset: p.name().into(),
            axes: None,
        };
    }
    Ok(cfg)
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} not found", path.display())))
    }
}

fn create_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn tpm_build(cfg: &Config, config: Option<&Path>, a: &TpmBuildArgs) -> CliResult<Vec<PathBuf>> {
    require_file(&a.input, "input CSV")?;
    let mut manifest = RunManifest::new("tpm build", config, None);
    manifest.hash_input(&a.input)?;
    let records = tpm::read_trajectories(BufReader::new(File::open(&a.input)?))?;
    let scenarios = tpm::extract_interaction_scenarios(&records, &Default::default())?;
    if scenarios.is_empty() {
        return Err(CliError::NoScenarios);
    }
    println!("scenarios: {}", scenarios.len());
    let grid = cfg.grid.resolve()?;
    let roles = match a.role {
        Some(r) => vec![Role::from(r)],
        None => vec![Role::Lkv, Role::Lcv],
    };
    create_out(&a.out)?;
    let mut written = Vec::new();
    for role in roles {
        let model = reference::learn(&scenarios, role, &grid, &cfg.actions)?;
        model.validate()?;
        let name = format!("tpm_{role}.json");
        let path = a.out.join(&name);
        model.save(&path)?;
        println!(
            "{role}: {} cells, coverage {:.3}, max |sum p - 1| {:.1e} -> {}",
            model.n_cells(),
            model.coverage(),
            model.max_normalization_error(),
            path.display()
        );
        manifest.outputs.push(name);
        written.push(path);
    }
    manifest.write(&a.out)?;
    Ok(written)
}

/// Resolve `--weights`: a preset name, a TOML file with a `[weights]` table,
/// or the configuration's weights.
fn resolve_weights(cfg: &Config, arg: Option<&str>, role: Role, manifest: &mut RunManifest) -> CliResult<(StageWeights, Option<String>)> {
    let wc = match arg {
        None => cfg.weights.clone(),
        Some(name @ ("neutral" | "aggressive" | "conservative")) => WeightsConfig {
            preset: name.into(),
            ..cfg.weights.clone()
        },
        Some(file) => {
            let path = Path::new(file);
            if !path.is_file() {
                return Err(CliError::Validation(format!(
                    "--weights `{file}` is neither a preset (neutral, aggressive, conservative) nor a file"
                )));
            }
            manifest.hash_input(path)?;
            Config::load(path)?.weights
        }
    };
    let label = wc.preset.clone();
    let overridden = !(match role {
        Role::Lkv => &wc.lkv,
        Role::Lcv => &wc.lcv,
    })
    .is_empty();
    Ok((wc.for_role(role)?, (!overridden).then_some(label)))
}

pub fn solve(cfg: &Config, config: Option<&Path>, a: &SolveArgs) -> CliResult<PathBuf> {
    let role = Role::from(a.role);
    require_file(&a.tpm, "opponent model")?;
    let mut manifest = RunManifest::new("solve", config, None);
    manifest.hash_input(&a.tpm)?;
    let model = Tpm::load(&a.tpm)?;
    if model.role != role {
        return Err(CliError::Validation(format!(
            "{} is the {} opponent model, not the {role} one",
            a.tpm.display(),
            model.role
        )));
    }
    let grid = cfg.grid.resolve()?;
    if model.condition_axes != grid.condition_axes() {
        return Err(CliError::Validation(format!(
            "grid/tpm mismatch: grid condition axes {} vs tpm condition axes {}",
            hash::json_hash(&grid.condition_axes()),
            model.axes_hash()
        )));
    }
    let (weights, preset) = resolve_weights(cfg, a.weights.as_deref(), role, &mut manifest)?;
    cfg.solver.validate()?;
    let actions = cfg.actions.for_role(role);
    println!("solving {role} on {} cells x {} actions", grid.n_cells(), actions.len());
    let start = Instant::now();
    let mut policy = policy_iteration_observed(&grid, actions, &model, &weights, &cfg.solver, |r| {
        eprintln!(
            "  iteration {:3}: {} sweeps, residual {:.2e}, {} cells changed",
            r.iteration, r.eval.sweeps, r.eval.residual, r.changed
        );
    })?;
    let wall = start.elapsed().as_secs_f64();
    policy.meta.weight_preset = preset;

    let mdp = Mdp::new(&grid, actions, &model, &weights, cfg.solver.gamma, cfg.solver.dt)?;
    let (greedy, _) = mdp.greedy(&policy.value);
    if greedy != policy.action_index {
        return Err(CliError::Runtime("greedy-consistency audit failed".into()));
    }
    println!(
        "iterations {}, bellman residual {:.2e}, wall time {:.1} s, audit ok",
        policy.meta.iterations, policy.meta.bellman_residual, wall
    );

    create_out(&a.out)?;
    let name = format!("policy_{role}.pol");
    let path = a.out.join(&name);
    policy.save(&path)?;
    manifest.outputs.push(name);
    manifest.write(&a.out)?;
    println!("-> {}", path.display());
    Ok(path)
}

fn load_policy(path: &Path, role: Role, manifest: &mut RunManifest) -> CliResult<Arc<Policy>> {
    require_file(path, "policy")?;
    manifest.hash_input(path)?;
    let p = Policy::load(path)?;
    if p.role != role {
        return Err(CliError::Validation(format!(
            "{} is a {} policy but drives the {role}",
            path.display(),
            p.role
        )));
    }
    Ok(Arc::new(p))
}

fn build_agent(cfg: &Config, arg: &AgentArg, role: Role, v0: f64, manifest: &mut RunManifest) -> CliResult<Agent> {
    let controller = match arg {
        AgentArg::Sdp(p) => Controller::Sdp(load_policy(p, role, manifest)?),
        AgentArg::Idm => Controller::Idm(cfg.idm),
        AgentArg::Gt => Controller::Gt(cfg.gt.clone()),
        AgentArg::Scripted(name) => Controller::Scripted(ScriptedProfile::preset(name)?),
    };
    Ok(Agent::new(role, controller, v0)?)
}

/// Scenario presets: `side-by-side` (both at `v0`, LCV one lane left) and
/// `side-by-side-mirrored` (LCV one lane right).
pub fn scenario_preset(cfg: &Config, name: &str, v0: f64) -> CliResult<Scenario> {
    let base = Scenario::side_by_side(v0);
    let mut s = cfg.scenario.clone();
    s.lkv_init = base.lkv_init;
    s.lcv_init = base.lcv_init;
    s.lcv_target_lane_y = base.lcv_target_lane_y;
    match name {
        "side-by-side" => Ok(s),
        "side-by-side-mirrored" => Ok(s.mirrored()),
        other => Err(CliError::Validation(format!(
            "unknown scenario `{other}` (expected side-by-side or side-by-side-mirrored)"
        ))),
    }
}

#[derive(Serialize)]
struct PlotRow<'a> {
    t: f64,
    vehicle: &'a str,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    ax: f64,
    ay: f64,
}

/// Tidy per-step data for velocity and position plots.
pub fn write_plot_csv<W: Write>(w: W, trace: &SimTrace) -> CliResult<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    for r in &trace.records {
        for (vehicle, s, ax, ay) in [("lkv", &r.lkv, r.a_lkv_x, 0.0), ("lcv", &r.lcv, r.a_lcv_x, r.a_lcv_y)] {
            out.serialize(PlotRow {
                t: r.t,
                vehicle,
                x: s.x,
                y: s.y,
                vx: s.vx,
                vy: s.vy,
                ax,
                ay,
            })
            .map_err(err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn sim(cfg: &Config, config: Option<&Path>, a: &SimArgs) -> CliResult<SimTrace> {
    if a.harsh && a.seed.is_none() {
        return Err(CliError::Usage("--seed is required with --harsh".into()));
    }
    if !(a.v0.is_finite() && a.v0 >= 0.0) {
        return Err(CliError::Validation(format!("--v0 must be a non-negative speed, got {}", a.v0)));
    }
    let mut manifest = RunManifest::new("sim", config, a.seed);
    let lkv = build_agent(cfg, &a.lkv, Role::Lkv, a.v0, &mut manifest)?;
    let lcv = build_agent(cfg, &a.lcv, Role::Lcv, a.v0, &mut manifest)?;
    let mut scenario = scenario_preset(cfg, &a.scenario, a.v0)?;
    if a.harsh {
        scenario.noise = Some(HARSH_NOISE);
    }
    if scenario.noise.is_some() {
        scenario.seed = a
            .seed
            .ok_or_else(|| CliError::Usage("--seed is required when the scenario has sensor noise".into()))?;
    }
    let trace = run_episode(&lkv, &lcv, &scenario)?;

    create_out(&a.out)?;
    write_trace_csv(BufWriter::new(File::create(a.out.join("trace.csv"))?), &trace)?;
    write_plot_csv(BufWriter::new(File::create(a.out.join("plot.csv"))?), &trace)?;
    let metrics = compute_metrics(std::slice::from_ref(&trace), scenario.seed)?;
    write_json(&a.out.join("metrics.json"), &metrics)?;
    manifest.outputs = vec!["trace.csv".into(), "plot.csv".into(), "metrics.json".into()];
    manifest.write(&a.out)?;

    println!(
        "{} vs {}: final x_lkv - x_lcv {:.2} m, vx {:.2} / {:.2} m/s, collision {}, lane change at {}",
        lkv.controller.name(),
        lcv.controller.name(),
        trace.final_lead_of_lkv(),
        trace.final_lkv.vx,
        trace.final_lcv.vx,
        trace.collision,
        trace.lane_change_time.map_or("never".into(), |t| format!("{t:.1} s"))
    );
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub pairing: String,
    pub condition: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, pairing: &str, condition: &str) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.pairing == pairing && r.condition == condition)
            .map(|r| &r.metrics)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn pairing_agents(
    cfg: &Config,
    p: Pairing,
    policies: (&Option<Arc<Policy>>, &Option<Arc<Policy>>),
) -> CliResult<(Agent, Agent)> {
    let need = |pol: &Option<Arc<Policy>>, flag: &str| {
        pol.clone()
            .ok_or_else(|| CliError::Usage(format!("pairing {} needs {flag}", p.name())))
    };
    let lkv = match p.lkv {
        ControllerKind::Sdp => Controller::Sdp(need(policies.0, "--lkv-policy")?),
        ControllerKind::Idm => Controller::Idm(cfg.idm),
        ControllerKind::Gt => {
            return Err(CliError::Validation(format!(
                "pairing {}: GT only drives the lane-changing vehicle (LKV: sdp or idm; LCV: sdp or gt)",
                p.name()
            )))
        }
    };
    let lcv = match p.lcv {
        ControllerKind::Sdp => Controller::Sdp(need(policies.1, "--lcv-policy")?),
        ControllerKind::Gt => Controller::Gt(cfg.gt.clone()),
        ControllerKind::Idm => {
            return Err(CliError::Validation(format!(
                "pairing {}: IDM only drives the lane-keeping vehicle (LKV: sdp or idm; LCV: sdp or gt)",
                p.name()
            )))
        }
    };
    Ok((Agent::new(Role::Lkv, lkv, 0.0)?, Agent::new(Role::Lcv, lcv, 0.0)?))
}

pub fn eval(cfg: &Config, config: Option<&Path>, a: &EvalArgs) -> CliResult<EvalReport> {
    let seed = a
        .seed
        .or(cfg.eval.seed)
        .ok_or_else(|| CliError::Usage("--seed is required (or `seed` in the [eval] table)".into()))?;
    let n = a.n.unwrap_or(cfg.eval.episodes);
    if n == 0 {
        return Err(CliError::Validation("--n must be positive".into()));
    }
    if a.pairs.is_empty() {
        return Err(CliError::Usage("no pairings given".into()));
    }
    let mut manifest = RunManifest::new("eval", config, Some(seed));
    let lkv_policy = a
        .lkv_policy
        .as_deref()
        .map(|p| load_policy(p, Role::Lkv, &mut manifest))
        .transpose()?;
    let lcv_policy = a
        .lcv_policy
        .as_deref()
        .map(|p| load_policy(p, Role::Lcv, &mut manifest))
        .transpose()?;
    let agents = a
        .pairs
        .iter()
        .map(|&p| pairing_agents(cfg, p, (&lkv_policy, &lcv_policy)).map(|ag| (p, ag)))
        .collect::<CliResult<Vec<_>>>()?;

    let base = cfg.scenario.clone();
    let mut conditions = vec![("nominal", base.clone())];
    if a.harsh || cfg.eval.harsh {
        let mut harsh = base;
        harsh.noise = Some(HARSH_NOISE);
        conditions.push(("harsh", harsh));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut rows = Vec::new();
    for (condition, scenario) in &conditions {
        for (p, (lkv, lcv)) in &agents {
            let start = Instant::now();
            let metrics = pool.install(|| monte_carlo(lkv, lcv, n, scenario, seed))?;
            eprintln!("{} {condition}: {n} episodes in {:.1} s", p.name(), start.elapsed().as_secs_f64());
            rows.push(EvalRow {
                pairing: p.name(),
                condition: condition.to_string(),
                metrics,
            });
        }
    }
    let report = EvalReport { episodes: n, seed, rows };

    create_out(&a.out)?;
    write_json(&a.out.join("metrics.json"), &report)?;
    let table = comparison_table(&report);
    std::fs::write(a.out.join("comparison.txt"), &table)?;
    manifest.outputs = vec!["metrics.json".into(), "comparison.txt".into()];
    manifest.write(&a.out)?;
    print!("{table}");
    Ok(report)
}

pub fn comparison_table(r: &EvalReport) -> String {
    let mut s = format!(
        "{:<8} {:<8} {:>9} {:>9} {:>9} {:>9} {:>17} {:>17} {:>7}\n",
        "pairing", "cond", "collision", "distance", "v_lkv", "v_lcv", "jerk_lkv", "jerk_lcv", "merged"
    );
    for row in &r.rows {
        let m = &row.metrics;
        s.push_str(&format!(
            "{:<8} {:<8} {:>8.1}% {:>9.2} {:>9.2} {:>9.2} {:>8.1}/{:<8.1} {:>8.1}/{:<8.1} {:>6.1}%\n",
            row.pairing,
            row.condition,
            100.0 * m.collision_rate,
            m.mean_distance,
            m.lkv.mean_velocity,
            m.lcv.mean_velocity,
            m.lkv.jerk_min,
            m.lkv.jerk_max,
            m.lcv.jerk_min,
            m.lcv.jerk_max,
            100.0 * m.lane_change_completion_rate
        ));
    }
    s
}


fn serve(a: &ServeArgs) -> CliResult<()> {
    require_file(&a.policy, "policy")?;
    let policy = Arc::new(Policy::load(&a.policy)?);
    let human = a.human_role.map(Role::from).unwrap_or(policy.role.opponent());
    if human == policy.role {
        return Err(CliError::Validation(format!(
            "{} drives the {human}; the human needs the other seat",
            a.policy.display()
        )));
    }
    if let Some(d) = a.static_dir.as_ref().filter(|d| !d.is_dir()) {
        return Err(CliError::Validation(format!("static directory {} not found", d.display())));
    }
    let session = duet::SessionConfig::new(policy, human, &a.scenario).map_err(duet_error)?;
    let addr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let mut cfg = duet::ServerConfig::new(addr, session);
    cfg.log_dir = a.log_dir.clone();
    cfg.static_dir = a.static_dir.clone();
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async move {
        let handle = duet::spawn(cfg).await.map_err(duet_error)?;
        eprintln!("serving the {} seat on {} (scenario {})", human, handle.addr, a.scenario);
        handle.wait().await.map_err(duet_error)
    })
}

fn duet_error(e: duet::DuetError) -> CliError {
    match e {
        duet::DuetError::Core(e) => e.into(),
        duet::DuetError::Io(e) => e.into(),
        e @ duet::DuetError::UnknownScenario(_) => CliError::Usage(e.to_string()),
        e => CliError::Runtime(e.to_string()),
    }
}
