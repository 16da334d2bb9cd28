use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coopdrive_core::Role;

#[derive(Debug, Parser)]
#[command(name = "coopdrive", version, about = "Cooperative lane-change policies: learn, solve, simulate, evaluate")]
pub struct Cli {
    /// Shared TOML configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Grid preset; overrides the configuration file.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<GridPreset>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridPreset {
    Desk,
    Full,
}

impl GridPreset {
    pub fn name(self) -> &'static str {
        match self {
            GridPreset::Desk => "desk",
            GridPreset::Full => "full",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Opponent models.
    #[command(subcommand)]
    Tpm(TpmCommand),
    /// Solve one role's policy by policy iteration.
    Solve(SolveArgs),
    /// Run one episode and write its trace.
    Sim(SimArgs),
    /// Monte-Carlo comparison of controller pairings.
    Eval(EvalArgs),
    /// Real-time duet: a human drives one vehicle against a policy.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 7878)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Policy for the machine-driven vehicle.
    #[arg(long)]
    pub policy: PathBuf,
    /// Seat for the human (default: the role the policy does not drive).
    #[arg(long, value_enum)]
    pub human_role: Option<RoleArg>,
    /// side-by-side or side-by-side-mirrored.
    #[arg(long, default_value = "side-by-side")]
    pub scenario: String,
    /// Directory for per-episode JSON-lines logs.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// Built cockpit assets served over plain HTTP on the same port.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TpmCommand {
    /// Extract scenarios from a trajectory CSV and learn opponent models.
    Build(TpmBuildArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Lkv,
    Lcv,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Lkv => Role::Lkv,
            RoleArg::Lcv => Role::Lcv,
        }
    }
}

#[derive(Debug, Args)]
pub struct TpmBuildArgs {
    /// Trajectory CSV `vehicle_id,t,x,y,vx,vy,lane_id`.
    #[arg(long)]
    pub input: PathBuf,
    /// Build only this role's model (default: both).
    #[arg(long, value_enum)]
    pub role: Option<RoleArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    pub role: RoleArg,
    /// Opponent model of `role`.
    #[arg(long)]
    pub tpm: PathBuf,
    /// Weight preset (neutral, aggressive, conservative) or a TOML file in
    /// the `[weights]` format.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Controller for one vehicle: `sdp:POLICY`, `idm`, `gt`, `scripted:NAME`.
#[derive(Clone, Debug, PartialEq)]
pub enum AgentArg {
    Sdp(PathBuf),
    Idm,
    Gt,
    Scripted(String),
}

impl FromStr for AgentArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k, Some(r)),
            None => (s, None),
        };
        match (kind, rest) {
            ("sdp", Some(p)) if !p.is_empty() => Ok(AgentArg::Sdp(p.into())),
            ("sdp", _) => Err("`sdp` needs a policy file: sdp:PATH".into()),
            ("idm", None) => Ok(AgentArg::Idm),
            ("gt", None) => Ok(AgentArg::Gt),
            ("scripted", Some(n)) if !n.is_empty() => Ok(AgentArg::Scripted(n.into())),
            ("scripted", _) => Err("`scripted` needs a profile name: scripted:NAME".into()),
            _ => Err(format!("unknown controller `{s}` (expected sdp:PATH, idm, gt or scripted:NAME)")),
        }
    }
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub lkv: AgentArg,
    #[arg(long)]
    pub lcv: AgentArg,
    /// Starting scenario preset.
    #[arg(long, default_value = "side-by-side")]
    pub scenario: String,
    /// Target (and initial) speed of both vehicles, m/s.
    #[arg(long, default_value_t = 11.0)]
    pub v0: f64,
    /// Add the harsh sensor-noise recipe (needs --seed).
    #[arg(long)]
    pub harsh: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ControllerKind {
    Sdp,
    Idm,
    Gt,
}

/// `LKV:LCV` controller names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pairing {
    pub lkv: ControllerKind,
    pub lcv: ControllerKind,
}

impl Pairing {
    pub fn name(&self) -> String {
        format!("{}:{}", kind_name(self.lkv), kind_name(self.lcv))
    }
}

fn kind_name(k: ControllerKind) -> &'static str {
    match k {
        ControllerKind::Sdp => "sdp",
        ControllerKind::Idm => "idm",
        ControllerKind::Gt => "gt",
    }
}

impl FromStr for Pairing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or_else(|| format!("pairing `{s}` is not of the form LKV:LCV"))?;
        let kind = |k: &str| ControllerKind::from_str(k, true).map_err(|_| format!("unknown controller `{k}` in `{s}`"));
        Ok(Pairing { lkv: kind(a)?, lcv: kind(b)? })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma-separated `LKV:LCV` pairings, e.g. `sdp:sdp,idm:gt`.
    #[arg(long, value_delimiter = ',', default_value = "sdp:sdp,idm:sdp,sdp:gt,idm:gt")]
    pub pairs: Vec<Pairing>,
    #[arg(long)]
    pub lkv_policy: Option<PathBuf>,
    #[arg(long)]
    pub lcv_policy: Option<PathBuf>,
    /// Episodes per pairing (default from the configuration, 1000).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also run every pairing under the harsh recipe.
    #[arg(long)]
    pub harsh: bool,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agent_args() {
        assert_eq!("sdp:a/b.pol".parse(), Ok(AgentArg::Sdp("a/b.pol".into())));
        assert_eq!("idm".parse(), Ok(AgentArg::Idm));
        assert_eq!("gt".parse(), Ok(AgentArg::Gt));
        assert_eq!("scripted:zero".parse(), Ok(AgentArg::Scripted("zero".into())));
        for bad in ["sdp", "sdp:", "scripted", "idm:x", "mpc", ""] {
            assert!(bad.parse::<AgentArg>().is_err(), "{bad}");
        }
    }

    #[test]
    fn pairings() {
        let p: Pairing = "SDP:gt".parse().unwrap();
        assert_eq!(p, Pairing { lkv: ControllerKind::Sdp, lcv: ControllerKind::Gt });
        assert_eq!(p.name(), "sdp:gt");
        assert!("sdp".parse::<Pairing>().is_err());
        assert!("sdp:mpc".parse::<Pairing>().is_err());
    }

    #[test]
    fn eval_defaults_to_all_pairings() {
        let cli = Cli::try_parse_from(["coopdrive", "eval", "--out", "x"]).unwrap();
        let Command::Eval(a) = cli.command else { panic!() };
        let names: Vec<String> = a.pairs.iter().map(Pairing::name).collect();
        assert_eq!(names, ["sdp:sdp", "idm:sdp", "sdp:gt", "idm:gt"]);
        assert_eq!(a.seed, None);
    }

    #[test]
    fn serve_defaults() {
        let cli = Cli::try_parse_from(["coopdrive", "serve", "--policy", "p.pol"]).unwrap();
        let Command::Serve(a) = cli.command else { panic!() };
        assert_eq!((a.port, a.scenario.as_str(), a.human_role), (7878, "side-by-side", None));
        assert!(Cli::try_parse_from(["coopdrive", "serve"]).is_err());
    }

    #[test]
    fn preset_is_global() {
        let cli = Cli::try_parse_from(["coopdrive", "solve", "--role", "lcv", "--tpm", "t", "--out", "o", "--preset", "full"]).unwrap();
        assert_eq!(cli.preset, Some(GridPreset::Full));
    }
}
