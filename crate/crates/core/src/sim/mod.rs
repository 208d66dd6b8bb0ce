//! Monte Carlo closed-loop simulation and the statistics computed from the
//! traces: violation rates, average cost, candidate feasibility, feasible
//! regions and convergence diagnostics.

mod diagnostics;
mod region;
mod stats;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::design::{Design, ProblemConfig};
use crate::disturbance::{stream_rng, DisturbanceModel};
use crate::error::{Error, Result};
use crate::polytope::Polytope;
use crate::qp::{self, QpStatus};

pub use diagnostics::{convergence_diagnostics, ConvergenceReport, TailPoint};
pub use region::{epsf_sweep, exact_area, feasible_region, hit_or_miss, write_sweep_csv, RegionEstimate, RegionMethod, SweepRow};
pub use stats::{
    average_cost, conditional_violation, disturbance_energy, lipschitz_estimate, one_step_value_check, violation_stats,
    wilson_interval, CostEstimate, Frequency, LipschitzEstimate, ValueCheck, ViolationReport,
};

/// Two-sided 95 % standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// How the realized disturbance is picked at each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbancePolicy {
    /// Draws from the disturbance distribution.
    Random,
    /// Uniformly chosen vertices of the support polytope.
    Vertex,
    /// A vertex with probability `vertex_prob`, otherwise a random draw.
    Mixed { vertex_prob: f64 },
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

impl From<QpStatus> for StepStatus {
    fn from(s: QpStatus) -> Self {
        match s {
            QpStatus::Optimal => StepStatus::Optimal,
            QpStatus::MaxIterations => StepStatus::MaxIterations,
            QpStatus::Infeasible => StepStatus::Infeasible,
        }
    }
}

impl std::fmt::Display for StepStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepStatus::Optimal => "optimal",
            StepStatus::MaxIterations => "max_iterations",
            StepStatus::Infeasible => "infeasible",
        })
    }
}

/// One closed-loop step at time `k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceStep {
    pub k: usize,
    pub x: Vec<f64>,
    /// Applied input (empty when the problem was infeasible).
    pub u: Vec<f64>,
    pub status: StepStatus,
    /// `‖x‖²_Q + ‖u‖²_R`.
    pub stage_cost: f64,
    /// Optimal value of the online problem including the constant term.
    pub value: f64,
    /// Whether the shifted plan of this step is feasible at the next state.
    pub candidate_feasible: Option<bool>,
    pub in_terminal: bool,
    /// Euclidean distance to the minimal RPI bound.
    pub dist_mrpi: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub steps: Vec<TraceStep>,
    /// State after the last step.
    pub final_state: Vec<f64>,
    /// Step at which the online problem was infeasible; the trace ends there.
    pub infeasible_at: Option<usize>,
    pub seed: u64,
    pub stream: u64,
    pub config_hash: String,
}

impl ClosedLoopTrace {
    /// States `x_0 … x_N` including the final one (when the run completed).
    pub fn states(&self) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self.steps.iter().map(|s| DVector::from_column_slice(&s.x)).collect();
        if self.infeasible_at.is_none() {
            out.push(DVector::from_column_slice(&self.final_state));
        }
        out
    }

    pub fn state(&self, k: usize) -> Option<DVector<f64>> {
        match self.steps.get(k) {
            Some(s) => Some(DVector::from_column_slice(&s.x)),
            None if k == self.steps.len() && self.infeasible_at.is_none() => Some(DVector::from_column_slice(&self.final_state)),
            None => None,
        }
    }
}

/// Controller plus the sets needed to annotate traces.
#[derive(Clone, Debug)]
pub struct Simulator {
    controller: Controller,
    model: DisturbanceModel,
    vertices: Vec<DVector<f64>>,
    terminal: Polytope,
    mrpi: Polytope,
    region: Polytope,
    config_hash: String,
}

impl Simulator {
    pub fn new(design: &Design, cfg: &ProblemConfig) -> Result<Self> {
        let model = cfg.disturbance_model()?;
        Self::from_parts(design.controller(cfg)?, model, design, design.config_hash.clone())
    }

    /// Simulator whose true system is driven by `model` instead of the
    /// designed disturbance.
    pub fn from_parts(controller: Controller, model: DisturbanceModel, design: &Design, config_hash: String) -> Result<Self> {
        let vertices = model.support().vertices()?;
        Ok(Self {
            controller,
            model,
            vertices,
            terminal: design.sets.terminal.set.clone(),
            mrpi: design.sets.mrpi.set.clone(),
            region: design.region().clone(),
            config_hash,
        })
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn model(&self) -> &DisturbanceModel {
        &self.model
    }

    pub fn region(&self) -> &Polytope {
        &self.region
    }

    pub fn terminal(&self) -> &Polytope {
        &self.terminal
    }

    pub fn mrpi(&self) -> &Polytope {
        &self.mrpi
    }

    fn disturbance<R: Rng + ?Sized>(&self, policy: DisturbancePolicy, rng: &mut R) -> DVector<f64> {
        let vertex = |rng: &mut R| self.vertices[rng.random_range(0..self.vertices.len())].clone();
        match policy {
            DisturbancePolicy::Random => self.model.draw(rng),
            DisturbancePolicy::Vertex => vertex(rng),
            DisturbancePolicy::Mixed { vertex_prob } => {
                if rng.random::<f64>() < vertex_prob {
                    vertex(rng)
                } else {
                    self.model.draw(rng)
                }
            }
            DisturbancePolicy::Zero => DVector::zeros(self.model.dim()),
        }
    }

    /// Closed loop from `x0` for `steps` steps with disturbances from stream
    /// `stream` of `seed`. Starting outside the feasible region is an error
    /// unless `allow_outside` is set.
    pub fn run(
        &self,
        x0: &DVector<f64>,
        steps: usize,
        policy: DisturbancePolicy,
        seed: u64,
        stream: u64,
        allow_outside: bool,
    ) -> Result<ClosedLoopTrace> {
        if !allow_outside && !self.region.contains_point(x0, 1e-9) {
            return Err(Error::OutsideRegion);
        }
        let sys = self.controller.system();
        let mut ctrl = self.controller.clone();
        let mut rng = stream_rng(seed, stream);
        let mut x = x0.clone();
        let mut out = Vec::with_capacity(steps);
        let mut infeasible_at = None;
        for k in 0..steps {
            let in_terminal = self.terminal.contains_point(&x, 1e-9);
            let dist_mrpi = distance(&self.mrpi, &x)?;
            match ctrl.mpc_step(&x) {
                Ok((u, sol)) => {
                    let w = self.disturbance(policy, &mut rng);
                    let candidate_feasible = ctrl.candidate_shift(&w).map(|c| c.feasible);
                    let stage_cost = x.dot(&(&sys.q * &x)) + u.dot(&(&sys.r * &u));
                    let next = sys.step(&x, &u, &w);
                    out.push(TraceStep {
                        k,
                        x: x.as_slice().to_vec(),
                        u: u.as_slice().to_vec(),
                        status: sol.status.into(),
                        stage_cost,
                        value: sol.value,
                        candidate_feasible,
                        in_terminal,
                        dist_mrpi,
                    });
                    x = next;
                }
                Err(Error::Infeasible) => {
                    out.push(TraceStep {
                        k,
                        x: x.as_slice().to_vec(),
                        u: Vec::new(),
                        status: StepStatus::Infeasible,
                        stage_cost: x.dot(&(&sys.q * &x)),
                        value: f64::INFINITY,
                        candidate_feasible: None,
                        in_terminal,
                        dist_mrpi,
                    });
                    infeasible_at = Some(k);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(ClosedLoopTrace {
            steps: out,
            final_state: x.as_slice().to_vec(),
            infeasible_at,
            seed,
            stream,
            config_hash: self.config_hash.clone(),
        })
    }

    /// One trace per initial state, trace `i` on stream `i`, in parallel.
    pub fn run_many(
        &self,
        x0s: &[DVector<f64>],
        steps: usize,
        policy: DisturbancePolicy,
        seed: u64,
        allow_outside: bool,
    ) -> Result<Vec<ClosedLoopTrace>> {
        x0s.par_iter()
            .enumerate()
            .map(|(i, x0)| self.run(x0, steps, policy, seed, i as u64, allow_outside))
            .collect()
    }

    /// `count` states drawn uniformly from `set` by rejection from its
    /// bounding box.
    pub fn sample_states(set: &Polytope, count: usize, seed: u64, stream: u64) -> Result<Vec<DVector<f64>>> {
        let (lo, hi) = set.bounding_box()?;
        let mut rng = stream_rng(seed, stream);
        let mut out = Vec::with_capacity(count);
        let mut tries = 0usize;
        while out.len() < count {
            tries += 1;
            if tries > 1000 * count.max(1) + 10_000 {
                return Err(Error::BadParams("rejection sampling accepted too few points".into()));
            }
            let x = DVector::from_fn(lo.len(), |i, _| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>());
            if set.contains_point(&x, 0.0) {
                out.push(x);
            }
        }
        Ok(out)
    }
}

/// Euclidean distance from `x` to a non-empty polytope.
pub fn distance(p: &Polytope, x: &DVector<f64>) -> Result<f64> {
    if p.contains_point(x, 0.0) {
        return Ok(0.0);
    }
    let n = x.len();
    let h = DMatrix::identity(n, n);
    let r = qp::solve(&h, &-x, p.normals(), p.offsets()).ok_or(Error::NotPositiveDefinite("distance QP"))?;
    if r.status != QpStatus::Optimal {
        return Err(Error::EmptyStage("distance target".into()));
    }
    Ok((r.x - x).norm())
}

/// Trace as CSV with columns `k, x1..xn, u1..um, status, stage_cost,
/// candidate_feasible, in_terminal, dist_mrpi`.
pub fn write_trace_csv<W: Write>(trace: &ClosedLoopTrace, nx: usize, nu: usize, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    header.extend((1..=nx).map(|i| format!("x{i}")));
    header.extend((1..=nu).map(|i| format!("u{i}")));
    header.extend(["status", "stage_cost", "candidate_feasible", "in_terminal", "dist_Xinf"].map(String::from));
    wtr.write_record(&header)?;
    for s in &trace.steps {
        let mut rec = vec![s.k.to_string()];
        rec.extend(s.x.iter().map(|v| format!("{v:e}")));
        rec.extend((0..nu).map(|i| s.u.get(i).map_or(String::new(), |v| format!("{v:e}"))));
        rec.push(s.status.to_string());
        rec.push(format!("{:e}", s.stage_cost));
        rec.push(s.candidate_feasible.map_or(String::new(), |b| b.to_string()));
        rec.push(s.in_terminal.to_string());
        rec.push(format!("{:e}", s.dist_mrpi));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{design, Scheme};

    pub(crate) const REGION: &str = include_str!("../../../../configs/region.json");

    fn setup(scheme: Scheme) -> (Design, Simulator) {
        let cfg = ProblemConfig::from_json(REGION).unwrap().with_scheme(scheme, None);
        let d = design(&cfg).unwrap();
        let sim = Simulator::new(&d, &cfg).unwrap();
        (d, sim)
    }

    #[test]
    fn zero_disturbance_from_terminal_set_is_lqr() {
        let (d, sim) = setup(Scheme::Proposed);
        let (lo, hi) = d.sets.terminal.set.bounding_box().unwrap();
        let x0 = Simulator::sample_states(&d.sets.terminal.set, 1, 3, 0).unwrap().remove(0);
        assert!(x0.iter().zip(lo.iter().zip(hi.iter())).all(|(v, (a, b))| v >= a && v <= b));
        let t = sim.run(&x0, 20, DisturbancePolicy::Zero, 1, 0, false).unwrap();
        let mut x = x0;
        for s in &t.steps {
            assert!((DVector::from_column_slice(&s.x) - &x).amax() < 1e-9);
            let u = &d.gains.gain * &x;
            assert!((s.u[0] - u[0]).abs() < 1e-9);
            assert!(s.in_terminal);
            assert_eq!(s.candidate_feasible, Some(true));
            x = &d.gains.closed_loop * x;
        }
    }

    #[test]
    fn origin_without_disturbance_stays_at_zero() {
        let (_, sim) = setup(Scheme::Robust);
        let t = sim.run(&DVector::zeros(2), 10, DisturbancePolicy::Zero, 0, 0, false).unwrap();
        assert!(t.steps.iter().all(|s| s.x.iter().chain(&s.u).all(|v| v.abs() < 1e-12) && s.dist_mrpi == 0.0));
        assert!(t.final_state.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn traces_are_reproducible_and_start_checked() {
        let (_, sim) = setup(Scheme::Tube);
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let a = sim.run(&x0, 15, DisturbancePolicy::Random, 9, 4, false).unwrap();
        let b = sim.run(&x0, 15, DisturbancePolicy::Random, 9, 4, false).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_trace_csv(&a, 2, 1, &mut ca).unwrap();
        write_trace_csv(&b, 2, 1, &mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with("k,x1,x2,u1,status,stage_cost,candidate_feasible,in_terminal,dist_Xinf\n"));
        assert_eq!(text.lines().count(), 16);
        let far = DVector::from_vec(vec![10.0, 10.0]);
        assert!(matches!(sim.run(&far, 5, DisturbancePolicy::Random, 9, 0, false), Err(Error::OutsideRegion)));
        let t = sim.run(&far, 5, DisturbancePolicy::Random, 9, 0, true).unwrap();
        assert_eq!(t.infeasible_at, Some(0));
        assert_eq!(t.steps[0].status, StepStatus::Infeasible);
    }

    #[test]
    fn distance_to_a_box() {
        let b = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(distance(&b, &DVector::from_vec(vec![0.5, 0.0])).unwrap(), 0.0);
        let d = distance(&b, &DVector::from_vec(vec![4.0, 5.0])).unwrap();
        assert!((d - 5.0).abs() < 1e-9);
    }
}
