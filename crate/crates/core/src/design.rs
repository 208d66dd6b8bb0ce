//! Problem configuration and the offline pipeline: gains, tightening,
//! terminal and invariant sets, and the online controller built from them.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{Controller, OnlineSets};
use crate::disturbance::{Certification, ConfidenceRegion, DisturbanceKind, DisturbanceModel};
use crate::error::{Error, Result};
use crate::invariant::{
    self, ControlInvariant, InvariantOptions, MrpiBound, TStepSet, TerminalSet,
};
use crate::lti::{lqr_synthesize, ControllerGains, LtiSystem};
use crate::polytope::Polytope;
use crate::tightening::{self, mixed, ChanceConstraints, Method, SamplingParams, StageTightening, Tightener, TighteningSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Stochastic tightening with the first-step constraint; mixed when
    /// `eps_f` is set.
    Proposed,
    /// Mixed schedule with `W_f = W`, no first-step constraint.
    Tube,
    /// Rigid tube: nominal constraints tightened by the minimal RPI bound
    /// `S`, a nominal terminal set and a free nominal initial state with
    /// `x − z_0 ∈ S`.
    Robust,
    /// Worst-case tightening of every row of the stochastic schedule.
    WorstCase,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Proposed => "proposed",
            Scheme::Tube => "tube",
            Scheme::Robust => "robust",
            Scheme::WorstCase => "worst_case",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Scheme::Proposed),
            "tube" => Ok(Scheme::Tube),
            "robust" => Ok(Scheme::Robust),
            "worst_case" => Ok(Scheme::WorstCase),
            other => Err(Error::BadParams(format!("unknown scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DisturbanceConfig {
    #[serde(flatten)]
    pub kind: DisturbanceKind,
    /// Facets of the outer polytope of round supports.
    #[serde(default = "default_facets")]
    pub facets: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_facets() -> usize {
    8
}

fn default_method() -> Method {
    Method::Sampled
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub system: LtiSystem,
    pub constraints: ChanceConstraints,
    pub disturbance: DisturbanceConfig,
    pub scheme: Scheme,
    #[serde(default)]
    pub eps_f: Option<f64>,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub tolerances: InvariantOptions,
    /// Default initial state of closed-loop runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ProblemConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.constraints.validate(self.system.nx(), self.system.nu())?;
        if let Some(e) = self.eps_f {
            if !(0.0..1.0).contains(&e) {
                return Err(Error::BadParams(format!("eps_f must lie in [0, 1), got {e}")));
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != self.system.nx() {
                return Err(Error::DimensionMismatch(format!("x0 has {} entries, state has {}", x0.len(), self.system.nx())));
            }
        }
        let s = &self.sampling;
        if !(s.beta > 0.0 && s.beta < 1.0) || !(s.bracket > 0.0 && s.bracket < 1.0) {
            return Err(Error::BadParams("sampling beta and bracket must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Same problem under another scheme and `eps_f`.
    pub fn with_scheme(&self, scheme: Scheme, eps_f: Option<f64>) -> Self {
        Self {
            scheme,
            eps_f,
            ..self.clone()
        }
    }

    pub fn disturbance_model(&self) -> Result<DisturbanceModel> {
        DisturbanceModel::new(self.disturbance.kind.clone(), self.disturbance.facets, self.disturbance.seed)
    }

    /// Tightening method actually used by the scheme.
    pub fn effective_method(&self) -> Method {
        match self.scheme {
            Scheme::Robust | Scheme::WorstCase => Method::WorstCase,
            _ => self.method,
        }
    }
}

/// Every set produced offline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SetPipelineResult {
    /// `X_f`.
    pub terminal: TerminalSet,
    /// `Z_f`.
    pub terminal_tightened: Polytope,
    /// Outer bound of the minimal RPI set.
    pub mrpi: MrpiBound,
    /// Largest `λ` with `X_∞ ⊕ λ·ball ⊆ X_f` (may be negative).
    pub lambda: f64,
    pub t_step: TStepSet,
    /// `C_∞`, the feasible region of the online problem.
    pub invariant: ControlInvariant,
    pub first_step: Option<Polytope>,
}

/// Gains, schedule and sets for one configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Design {
    pub scheme: Scheme,
    pub eps_f: Option<f64>,
    pub gains: ControllerGains,
    pub schedule: TighteningSchedule,
    pub confidence_region: Option<ConfidenceRegion>,
    pub sets: SetPipelineResult,
    pub config_hash: String,
}

/// Gains, terminal set and schedule: everything before the invariant sets.
#[derive(Clone, Debug)]
pub struct TighteningStage {
    pub gains: ControllerGains,
    pub terminal: TerminalSet,
    pub schedule: TighteningSchedule,
    pub confidence_region: Option<ConfidenceRegion>,
}

pub fn tighten(cfg: &ProblemConfig, model: &DisturbanceModel) -> Result<TighteningStage> {
    let sys = &cfg.system;
    let gains = lqr_synthesize(sys)?;
    if cfg.scheme == Scheme::Robust {
        return rigid_tube_stage(cfg, model, gains);
    }
    // Tightening draws, including the confidence region, follow the sampling seed.
    let model = &model.with_seed(cfg.sampling.seed);
    let tightener = Tightener::new(sys, &gains, model, &cfg.constraints, cfg.sampling, cfg.effective_method())?;
    let stages = tightener.stage_tightening()?;
    // Report an empty stage before it surfaces as an empty terminal set.
    for (l, eta) in stages.eta.iter().enumerate() {
        if Polytope::new(cfg.constraints.state_normals.clone(), eta.clone())?.is_empty() {
            return Err(Error::InfeasibleTightening(format!("Z_{}", l + 1)));
        }
    }
    let candidate = invariant::terminal_candidate(&gains, &cfg.constraints, &stages.eta[0])?;
    if candidate.is_empty() {
        return Err(Error::EmptyTerminalSet);
    }
    let terminal = invariant::terminal_set(&gains, &sys.bw, model.support(), &candidate, &cfg.tolerances)?;
    let region = match (cfg.scheme, cfg.eps_f) {
        (Scheme::Proposed, Some(eps_f)) => Some((model.confidence_region(eps_f, cfg.sampling.beta)?, eps_f)),
        (Scheme::Tube, _) => Some((
            ConfidenceRegion {
                region: model.support().clone(),
                level: 1.0,
                scale: 1.0,
                certified_by: Certification::Analytic,
            },
            0.0,
        )),
        (Scheme::Proposed, None) | (Scheme::Robust | Scheme::WorstCase, _) => None,
    };
    let (terminal, schedule, confidence_region) = match region {
        Some((region, eps_f)) => {
            let first = mixed::mixed_schedule(&tightener, &stages, &terminal.set, &region, eps_f)?;
            let zf = first.terminal_set(terminal.set.normals()).reduce();
            let (terminal, s) = if first.state_set(&cfg.constraints, sys.horizon).contains(&zf, cfg.tolerances.fixed_point_tol) {
                (terminal, first)
            } else {
                nested_terminal(cfg, model, &tightener, &stages, &candidate, &region, eps_f)?
            };
            (terminal, s, Some(region))
        }
        None => {
            let s = tightener.plain_schedule(&stages, &terminal.set)?;
            (terminal, s, None)
        }
    };
    schedule.check_nonempty(&cfg.constraints)?;
    Ok(TighteningStage {
        gains,
        terminal,
        schedule,
        confidence_region,
    })
}

/// Terminal set and mixed schedule with `Z_f ⊆ Z_T` by construction.
///
/// Every mixed terminal offset is `h_f − t(row)` with `t` independent of
/// `h_f`, so bounding `X_f` by `H x ≤ η_T + t(H)` and keeping those rows in
/// its representation puts `H z ≤ η_T` among the rows of `Z_f`.
fn nested_terminal(
    cfg: &ProblemConfig,
    model: &DisturbanceModel,
    tightener: &Tightener,
    stages: &StageTightening,
    candidate: &Polytope,
    region: &ConfidenceRegion,
    eps_f: f64,
) -> Result<(TerminalSet, TighteningSchedule)> {
    let sys = &cfg.system;
    let normals = &cfg.constraints.state_normals;
    // With zero offsets the probe's terminal rows are `−t(H)`.
    let rows = Polytope::new(normals.clone(), DVector::zeros(normals.nrows()))?;
    let probe = mixed::mixed_schedule(tightener, stages, &rows, region, eps_f)?;
    let bound = Polytope::new(normals.clone(), &probe.eta[sys.horizon - 1] - &probe.eta_f)?;
    let inside = candidate.intersect(&bound)?;
    let mut terminal = invariant::terminal_set(tightener.gains, &sys.bw, model.support(), &inside, &cfg.tolerances)?;
    if terminal.set.is_empty() {
        return Err(Error::EmptyTerminalSet);
    }
    terminal.set = terminal.set.intersect(&bound)?;
    let schedule = mixed::mixed_schedule(tightener, stages, &terminal.set, region, eps_f)?;
    Ok((terminal, schedule))
}

/// Nominal terminal set inside the tube-tightened constraints and the
/// rigid-tube schedule.
fn rigid_tube_stage(cfg: &ProblemConfig, model: &DisturbanceModel, gains: ControllerGains) -> Result<TighteningStage> {
    let sys = &cfg.system;
    let cons = &cfg.constraints;
    let tube = invariant::mrpi_outer(&gains, &sys.bw, model.support(), &cfg.tolerances)?.set;
    let unbounded = Polytope::universe(sys.nx());
    let loose = tightening::rigid_tube_schedule(cons, &gains, &tube, &unbounded, sys.horizon, cfg.sampling.seed)?;
    let inside = schedule_rows_under_feedback(cons, &gains, &loose)?;
    let origin = Polytope::point(&vec![0.0; sys.nw()]);
    let terminal = invariant::terminal_set(&gains, &sys.bw, &origin, &inside, &cfg.tolerances)?;
    let schedule = tightening::rigid_tube_schedule(cons, &gains, &tube, &terminal.set, sys.horizon, cfg.sampling.seed)?;
    schedule.check_nonempty(cons)?;
    Ok(TighteningStage {
        gains,
        terminal,
        schedule,
        confidence_region: None,
    })
}

/// `{z | H z ≤ η_1, G K z ≤ μ_0}`.
fn schedule_rows_under_feedback(cons: &ChanceConstraints, gains: &ControllerGains, schedule: &TighteningSchedule) -> Result<Polytope> {
    let state = schedule.state_set(cons, 1);
    let input = Polytope::new(&cons.input_normals * &gains.gain, schedule.mu[0].clone())?;
    Ok(state.intersect(&input)?.reduce())
}

/// Runs the whole offline pipeline for `cfg`.
pub fn design(cfg: &ProblemConfig) -> Result<Design> {
    cfg.validate()?;
    let model = cfg.disturbance_model()?;
    let stage = tighten(cfg, &model)?;
    let sets = build_sets(cfg, &model, &stage)?;
    Ok(Design {
        scheme: cfg.scheme,
        eps_f: cfg.eps_f,
        gains: stage.gains,
        schedule: stage.schedule,
        confidence_region: stage.confidence_region,
        sets,
        config_hash: cfg.hash(),
    })
}

pub fn build_sets(cfg: &ProblemConfig, model: &DisturbanceModel, stage: &TighteningStage) -> Result<SetPipelineResult> {
    let sys = &cfg.system;
    let cons = &cfg.constraints;
    let w = model.support();
    let opts = &cfg.tolerances;
    let zf = stage.schedule.terminal_set(stage.terminal.set.normals()).reduce();
    if zf.is_empty() {
        return Err(Error::EmptyStage("Z_f".into()));
    }
    let mixed = cfg.scheme == Scheme::Tube || (cfg.scheme == Scheme::Proposed && cfg.eps_f.is_some());
    if mixed && !stage.schedule.state_set(cons, sys.horizon).contains(&zf, opts.fixed_point_tol) {
        return Err(Error::TerminalNotNested);
    }
    let t_step = invariant::t_step_set(sys, cons, &stage.schedule, &zf)?;
    let mrpi = invariant::mrpi_outer(&stage.gains, &sys.bw, w, opts)?;
    let invariant = if cfg.scheme == Scheme::Robust {
        let set = invariant::rigid_tube_region(cons, &stage.schedule, &t_step, &mrpi.set)?;
        ControlInvariant {
            projection: set.clone(),
            set,
            iterations: 0,
        }
    } else {
        invariant::robust_control_invariant(sys, &t_step.lifted, w, opts)?
    };
    let first_step = match cfg.scheme {
        Scheme::Proposed => Some(invariant::first_step_set(&invariant.set, &sys.bw, w)?.reduce()),
        Scheme::Tube | Scheme::Robust | Scheme::WorstCase => None,
    };
    let lambda = invariant::lambda_margin(&stage.terminal.set, &mrpi.set)?;
    if lambda <= 0.0 && cfg.scheme != Scheme::Robust {
        log::warn!("minimal RPI bound is not strictly inside the terminal set (lambda = {lambda:.3e})");
    }
    Ok(SetPipelineResult {
        terminal: stage.terminal.clone(),
        terminal_tightened: zf,
        mrpi,
        lambda,
        t_step,
        invariant,
        first_step,
    })
}

impl Design {
    pub fn controller(&self, cfg: &ProblemConfig) -> Result<Controller> {
        Controller::new(
            &cfg.system,
            &self.gains,
            &cfg.constraints,
            &self.schedule,
            OnlineSets {
                terminal: self.sets.terminal_tightened.clone(),
                first_step: self.sets.first_step.clone(),
                tube: (self.scheme == Scheme::Robust).then(|| self.sets.mrpi.set.clone()),
            },
        )
    }

    /// Feasible region of the online problem.
    pub fn region(&self) -> &Polytope {
        &self.sets.invariant.set
    }

    pub fn in_region(&self, x: &DVector<f64>) -> bool {
        self.region().contains_point(x, 1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"{
        "system": {"A": [[0.9]], "B": [[1.0]], "Bw": [[1.0]], "Q": [[1.0]], "R": [[1.0]], "T": 3},
        "constraints": {"H": [[1.0], [-1.0]], "h": [2.0, 2.0], "eps": [0.2, 0.2],
                        "G": [[1.0], [-1.0]], "g": [1.0, 1.0], "eps_u": 0.1, "terminal_eps": 0.1},
        "disturbance": {"kind": "uniform_box", "lo": [-0.2], "hi": [0.2], "seed": 3},
        "scheme": "proposed",
        "eps_f": 0.1
    }"#;

    #[test]
    fn config_round_trip_and_hash() {
        let cfg = ProblemConfig::from_json(SCALAR).unwrap();
        assert_eq!(cfg.disturbance.facets, 8);
        assert_eq!(cfg.sampling, SamplingParams::default());
        let again = ProblemConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg.hash(), again.hash());
        assert_ne!(cfg.hash(), cfg.with_scheme(Scheme::Tube, None).hash());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let bad_eps = SCALAR.replace("\"eps_u\": 0.1", "\"eps_u\": 1.5");
        assert!(matches!(ProblemConfig::from_json(&bad_eps), Err(Error::BadParams(_))));
        let bad_json = SCALAR.replace("\"scheme\": \"proposed\"", "\"scheme\": \"nope\"");
        assert!(matches!(ProblemConfig::from_json(&bad_json), Err(Error::Json(_))));
    }

    #[test]
    fn scalar_schemes_are_nested() {
        let cfg = ProblemConfig::from_json(SCALAR).unwrap();
        let proposed = design(&cfg).unwrap();
        let tube = design(&cfg.with_scheme(Scheme::Tube, None)).unwrap();
        let robust = design(&cfg.with_scheme(Scheme::Robust, None)).unwrap();
        let worst = design(&cfg.with_scheme(Scheme::WorstCase, None)).unwrap();
        assert!(proposed.region().contains(tube.region(), 1e-9));
        assert!(tube.region().contains(robust.region(), 1e-9));
        assert!(proposed.region().contains(worst.region(), 1e-9));
        assert!(proposed.sets.first_step.is_some() && tube.sets.first_step.is_none());
        let ctrl = proposed.controller(&cfg).unwrap();
        assert!(ctrl.n_constraints() > 0);
    }
}
