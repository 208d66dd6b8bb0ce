//! `smpc`: offline design, closed-loop simulation and reports for the
//! stochastic MPC toolkit.
//!
//! Exit codes: 0 ok, 2 bad config or arguments, 3 infeasible tightening,
//! 4 empty set, 5 anything else at runtime.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use smpc_core::design::Scheme;

#[derive(Parser, Debug)]
#[command(name = "smpc", version, about = "Stochastic MPC design and evaluation")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// LQR gain, terminal weight and closed loop.
    Synthesize(Common),
    /// Tightened constraint schedule.
    Tighten(Common),
    /// Terminal, mRPI, T-step and invariant sets.
    Sets(SetsArgs),
    /// Closed-loop runs: one trace CSV per run plus a summary report.
    Simulate(SimulateArgs),
    /// Feasible-region areas and polygons of several schemes.
    Region(RegionArgs),
    /// Feasible-region area over a grid of eps_f values.
    Sweep(SweepArgs),
    /// Monte Carlo statistics: violations, cost bound, convergence.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Problem configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the tightening draws for the design commands (overrides the
    /// config); seed of the disturbances for `simulate` and `report`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<Scheme>,
    /// Confidence level of the mixed schedule; `none` for the plain one.
    #[arg(long, value_parser = parse_eps_f)]
    pub eps_f: Option<EpsF>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Lattice points of the convolution method.
    #[arg(long, default_value_t = smpc_core::tightening::convolution::DEFAULT_GRID)]
    pub grid: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EpsF(pub Option<f64>);

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Sampled,
    Convolution,
}

#[derive(Args, Debug)]
struct SetsArgs {
    #[command(flatten)]
    common: Common,
    /// Schedule written by `tighten`; must come from the same configuration.
    #[arg(long)]
    schedule: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PolicyArg {
    Random,
    Vertex,
    Mixed,
    Zero,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 15)]
    pub steps: usize,
    /// Initial state as comma-separated values. Defaults to the config's
    /// `x0`, else uniform samples from the feasible region.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Random)]
    pub policy: PolicyArg,
    /// Allow initial states outside the feasible region.
    #[arg(long)]
    pub allow_outside: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    run: RunArgs,
    /// Set bundle written by `sets`; must come from the same configuration.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RegionArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', value_parser = parse_scheme, default_value = "proposed,tube,robust")]
    schemes: Vec<Scheme>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1,0.2,0.4")]
    eps_f_grid: Vec<f64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 20)]
    burn_in: usize,
    /// Distance threshold of the convergence diagnostics.
    #[arg(long, default_value_t = 0.05)]
    eps2: f64,
    #[arg(long, default_value_t = 1_000_000)]
    energy_draws: usize,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: smpc_core::Error| e.to_string())
}

fn parse_eps_f(s: &str) -> Result<EpsF, String> {
    if s == "none" {
        return Ok(EpsF(None));
    }
    s.parse::<f64>().map(|v| EpsF(Some(v))).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(5);
        }
    }
    let result = match cli.command {
        Command::Synthesize(c) => commands::synthesize(&c),
        Command::Tighten(c) => commands::tighten(&c),
        Command::Sets(a) => commands::sets(&a.common, a.schedule.as_deref()),
        Command::Simulate(a) => commands::simulate(&a.common, &a.run, a.bundle.as_deref()),
        Command::Region(a) => commands::region(&a.common, &a.schemes),
        Command::Sweep(a) => commands::sweep(&a.common, &a.eps_f_grid),
        Command::Report(a) => commands::report(&a.common, &a.run, a.burn_in, a.eps2, a.energy_draws),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
