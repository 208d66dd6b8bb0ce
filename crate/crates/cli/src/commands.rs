use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};
use smpc_core::design::{design, tighten as tighten_stage, Design, ProblemConfig, Scheme};
use smpc_core::sim::{
    average_cost, conditional_violation, convergence_diagnostics, disturbance_energy, epsf_sweep, exact_area, feasible_region,
    lipschitz_estimate, violation_stats, write_sweep_csv, write_trace_csv, ClosedLoopTrace, DisturbancePolicy, Frequency,
    RegionMethod, Simulator, Z95,
};
use smpc_core::tightening::Method;
use smpc_core::Error;

use crate::{Common, MethodArg, PolicyArg, RunArgs};

/// Hit-or-miss samples for regions of more than two states.
const REGION_SAMPLES: usize = 200_000;
/// First steps covered by the marginal violation report.
const VIOLATION_WINDOW: usize = 6;
const CONDITIONAL_TRACES: usize = 200;
const CONDITIONAL_DRAWS: usize = 200;
const LIPSCHITZ_PAIRS: usize = 400;
/// Stream of the initial-state draws, apart from the per-run streams.
const START_STREAM: u64 = u64::MAX;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::BadParams(_) | Error::DimensionMismatch(_) | Error::Json(_) | Error::DimensionUnsupported(_) => 2,
            Error::InfeasibleTightening(_) | Error::NoFeasiblePair { .. } | Error::GridTooCoarse { .. } => 3,
            Error::EmptySet | Error::EmptyTerminalSet | Error::EmptyStage(_) | Error::TerminalNotNested => 4,
            _ => 5,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: 5,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Loads the config and applies the command-line overrides. Every failure
/// here is a configuration error.
fn load(c: &Common, seed_is_sampling: bool) -> CliResult<ProblemConfig> {
    let mut cfg = ProblemConfig::load(&c.config).map_err(|e| CliError::usage(format!("{}: {e}", c.config.display())))?;
    if let Some(s) = c.scheme {
        cfg.scheme = s;
    }
    if let Some(e) = c.eps_f {
        cfg.eps_f = e.0;
    }
    match c.method {
        Some(MethodArg::Sampled) => cfg.method = Method::Sampled,
        Some(MethodArg::Convolution) => cfg.method = Method::Convolution { grid: c.grid },
        None => {}
    }
    if seed_is_sampling {
        if let Some(s) = c.seed {
            cfg.sampling.seed = s;
        }
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    emit(out, &text)
}

/// Fails unless the JSON file at `path` carries `hash`.
fn check_provenance(path: &Path, hash: &str) -> CliResult {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    match v.get("config_hash").and_then(Value::as_str) {
        Some(h) if h == hash => Ok(()),
        Some(_) => Err(CliError::usage(format!("{} was produced from a different configuration", path.display()))),
        None => Err(CliError::usage(format!("{} has no config_hash", path.display()))),
    }
}

pub fn synthesize(c: &Common) -> CliResult {
    let cfg = load(c, true)?;
    let gains = smpc_core::lti::lqr_synthesize(&cfg.system)?;
    emit_json(
        c.out.as_deref(),
        &json!({ "config_hash": cfg.hash(), "gains": gains }),
    )
}

pub fn tighten(c: &Common) -> CliResult {
    let cfg = load(c, true)?;
    let model = cfg.disturbance_model()?;
    let stage = tighten_stage(&cfg, &model)?;
    let s = &stage.schedule;
    eprintln!("scheme {} eps_f {:?}, {:?}, seed {}", cfg.scheme, cfg.eps_f, s.variant, s.seed);
    for (l, eta) in s.eta.iter().enumerate() {
        eprintln!("  Z_{}: {:?}", l + 1, eta.as_slice());
    }
    for (l, mu) in s.mu.iter().enumerate() {
        eprintln!("  V_{l}: {:?}", mu.as_slice());
    }
    eprintln!("  Z_f: {} rows, X_f: {} rows", s.eta_f.len(), stage.terminal.set.n_rows());
    emit_json(
        c.out.as_deref(),
        &json!({
            "config_hash": cfg.hash(),
            "scheme": cfg.scheme,
            "eps_f": cfg.eps_f,
            "schedule": s,
            "terminal_normals": stage.terminal.set.normals().row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        }),
    )
}

fn checked_design(cfg: &ProblemConfig) -> CliResult<Design> {
    let d = design(cfg)?;
    if d.region().is_empty() {
        return Err(Error::EmptyStage("C_inf".into()).into());
    }
    Ok(d)
}

pub fn sets(c: &Common, schedule: Option<&Path>) -> CliResult {
    let cfg = load(c, true)?;
    if let Some(p) = schedule {
        check_provenance(p, &cfg.hash())?;
    }
    let d = checked_design(&cfg)?;
    let s = &d.sets;
    eprintln!("X_f: {} iterations, {} rows", s.terminal.iterations, s.terminal.set.n_rows());
    eprintln!("mRPI bound: {} terms, contraction {:.3e}", s.mrpi.terms, s.mrpi.contraction);
    eprintln!("T-step set: {} stages", s.t_step.stages.len());
    eprintln!("C_inf: {} iterations, {} rows", s.invariant.iterations, s.invariant.set.n_rows());
    emit_json(
        c.out.as_deref(),
        &json!({
            "config_hash": cfg.hash(),
            "scheme": cfg.scheme,
            "eps_f": cfg.eps_f,
            "sets": s,
        }),
    )
}

fn policy(p: PolicyArg) -> DisturbancePolicy {
    match p {
        PolicyArg::Random => DisturbancePolicy::Random,
        PolicyArg::Vertex => DisturbancePolicy::Vertex,
        PolicyArg::Mixed => DisturbancePolicy::Mixed { vertex_prob: 0.5 },
        PolicyArg::Zero => DisturbancePolicy::Zero,
    }
}

fn starts(cfg: &ProblemConfig, d: &Design, run: &RunArgs, seed: u64) -> CliResult<Vec<DVector<f64>>> {
    let fixed = run.x0.clone().or_else(|| cfg.x0.clone());
    match fixed {
        Some(x0) if x0.len() != cfg.system.nx() => Err(CliError::usage(format!(
            "x0 has {} entries, state has {}",
            x0.len(),
            cfg.system.nx()
        ))),
        Some(x0) => Ok(vec![DVector::from_vec(x0); run.runs]),
        None => Ok(Simulator::sample_states(d.region(), run.runs, seed, START_STREAM)?),
    }
}

struct Campaign {
    cfg: ProblemConfig,
    design: Design,
    sim: Simulator,
    traces: Vec<ClosedLoopTrace>,
    seed: u64,
}

fn campaign(c: &Common, run: &RunArgs, bundle: Option<&Path>) -> CliResult<Campaign> {
    let cfg = load(c, false)?;
    if let Some(p) = bundle {
        check_provenance(p, &cfg.hash())?;
    }
    if run.runs == 0 || run.steps == 0 {
        return Err(CliError::usage("runs and steps must be positive"));
    }
    let seed = c.seed.unwrap_or(0);
    let design = checked_design(&cfg)?;
    let sim = Simulator::new(&design, &cfg)?;
    let x0s = starts(&cfg, &design, run, seed)?;
    let traces = sim.run_many(&x0s, run.steps, policy(run.policy), seed, run.allow_outside)?;
    Ok(Campaign {
        cfg,
        design,
        sim,
        traces,
        seed,
    })
}

/// Steps where the shifted previous plan was checked, and how often it was
/// infeasible.
fn candidate_frequency(traces: &[ClosedLoopTrace]) -> Frequency {
    let checked: Vec<bool> = traces.iter().flat_map(|t| t.steps.iter().filter_map(|s| s.candidate_feasible)).collect();
    Frequency::new(checked.iter().filter(|f| !**f).count(), checked.len())
}

fn summary(k: &Campaign, run: &RunArgs) -> CliResult<Value> {
    let constraints = k.cfg.constraints.state_set();
    let last = VIOLATION_WINDOW.min(run.steps);
    let violation = violation_stats(&k.traces, &constraints, 1..=last)?;
    let infeasible: Vec<usize> = k.traces.iter().enumerate().filter(|(_, t)| t.infeasible_at.is_some()).map(|(i, _)| i).collect();
    Ok(json!({
        "config_hash": k.cfg.hash(),
        "scheme": k.cfg.scheme,
        "eps_f": k.cfg.eps_f,
        "runs": run.runs,
        "steps": run.steps,
        "seed": k.seed,
        "policy": policy(run.policy),
        "infeasible_runs": infeasible,
        "candidate_infeasible": candidate_frequency(&k.traces),
        "violation": violation,
    }))
}

fn infeasibility_error(traces: &[ClosedLoopTrace]) -> CliResult {
    let n = traces.iter().filter(|t| t.infeasible_at.is_some()).count();
    if n > 0 {
        return Err(CliError {
            code: 5,
            message: format!("{n} runs reached an infeasible online problem"),
        });
    }
    Ok(())
}

pub fn simulate(c: &Common, run: &RunArgs, bundle: Option<&Path>) -> CliResult {
    let dir = c.out.as_deref().ok_or_else(|| CliError::usage("simulate writes a directory; pass --out"))?;
    let k = campaign(c, run, bundle)?;
    let traces_dir = dir.join("traces");
    fs::create_dir_all(&traces_dir)?;
    let (nx, nu) = (k.cfg.system.nx(), k.cfg.system.nu());
    let width = k.traces.len().to_string().len().max(5);
    for (i, t) in k.traces.iter().enumerate() {
        let f = fs::File::create(traces_dir.join(format!("run_{i:0width$}.csv")))?;
        write_trace_csv(t, nx, nu, std::io::BufWriter::new(f))?;
    }
    let report = summary(&k, run)?;
    emit_json(Some(&dir.join("report.json")), &report)?;
    infeasibility_error(&k.traces)
}

pub fn report(c: &Common, run: &RunArgs, burn_in: usize, eps2: f64, energy_draws: usize) -> CliResult {
    let k = campaign(c, run, None)?;
    let mut report = summary(&k, run)?;
    let constraints = k.cfg.constraints.state_set();
    let sys = &k.cfg.system;
    let conditional = conditional_violation(&k.sim, &k.traces, &constraints, sys.horizon, CONDITIONAL_TRACES, CONDITIONAL_DRAWS, k.seed);
    let energy = disturbance_energy(k.sim.model(), &k.design.gains.terminal_weight, &sys.bw, energy_draws, k.seed);
    let cost = if run.steps > burn_in { Some(average_cost(&k.traces, &sys.q, burn_in)?) } else { None };
    let bound_holds = cost.map(|c| c.mean <= energy.mean + Z95 * (c.se * c.se + energy.se * energy.se).sqrt());
    let lipschitz = lipschitz_estimate(k.sim.controller(), k.design.region(), k.sim.model().support(), LIPSCHITZ_PAIRS, k.seed)?;
    let cutoffs: Vec<usize> = (0..run.steps).step_by(10.max(run.steps / 10)).collect();
    let convergence = convergence_diagnostics(&k.traces, eps2, &cutoffs);
    let extra = json!({
        "conditional_violation": conditional,
        "burn_in": burn_in,
        "average_cost": cost,
        "disturbance_energy": energy,
        "cost_bound_holds": bound_holds,
        "lipschitz_estimate": lipschitz,
        "convergence": convergence,
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut report, extra) {
        base.extend(more);
    }
    emit_json(c.out.as_deref(), &report)?;
    infeasibility_error(&k.traces)
}

pub fn region(c: &Common, schemes: &[Scheme]) -> CliResult {
    let cfg = load(c, true)?;
    if schemes.is_empty() {
        return Err(CliError::usage("no schemes given"));
    }
    let designs: Vec<(Scheme, Design)> = schemes
        .iter()
        .map(|&s| {
            let eps_f = if s == Scheme::Proposed { cfg.eps_f } else { None };
            Ok((s, checked_design(&cfg.with_scheme(s, eps_f))?))
        })
        .collect::<CliResult<_>>()?;
    let mut regions = Vec::new();
    for (s, d) in &designs {
        let est = if cfg.system.nx() == 2 {
            exact_area(d.region())?
        } else {
            feasible_region(d, RegionMethod::HitOrMiss { samples: REGION_SAMPLES }, cfg.sampling.seed)?
        };
        regions.push(json!({ "scheme": s, "eps_f": d.eps_f, "estimate": est }));
    }
    let base = designs[0].1.region().area().ok();
    let mut pairs = Vec::new();
    for (si, di) in &designs {
        for (sj, dj) in &designs {
            if si != sj {
                pairs.push(json!({
                    "inner": si,
                    "outer": sj,
                    "contained": dj.region().contains(di.region(), 1e-9),
                }));
            }
        }
    }
    let ratios: Vec<Value> = designs
        .iter()
        .map(|(s, d)| {
            let r = match (base, d.region().area()) {
                (Some(b), Ok(a)) if a > 0.0 => Some(b / a),
                _ => None,
            };
            json!({ "scheme": s, "first_over_this": r })
        })
        .collect();
    emit_json(
        c.out.as_deref(),
        &json!({
            "config_hash": cfg.hash(),
            "regions": regions,
            "ratios": ratios,
            "containment": pairs,
        }),
    )
}

pub fn sweep(c: &Common, grid: &[f64]) -> CliResult {
    let cfg = load(c, true)?;
    if grid.is_empty() {
        return Err(CliError::usage("empty eps_f grid"));
    }
    let rows = epsf_sweep(&cfg, grid)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &cfg.hash(), &mut buf)?;
    emit(c.out.as_deref(), &String::from_utf8(buf).expect("csv is UTF-8"))
}
