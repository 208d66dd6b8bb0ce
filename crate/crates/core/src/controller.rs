//! Online finite-horizon problem in condensed form, the receding-horizon
//! law `u_k = v*_{0|k}` and the shifted candidate plan.
//!
//! Nominal states are eliminated through `z_l = A^l x + Σ_{j<l} A^{l−1−j} B v_j`,
//! leaving a QP in the stacked inputs `v = (v_0, …, v_{T−1})`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{ControllerGains, LtiSystem};
use crate::polytope::Polytope;
use crate::qp::{self, QpStatus};
use crate::tightening::{ChanceConstraints, TighteningSchedule};

/// Slack allowed when judging a candidate plan feasible.
pub const CANDIDATE_TOL: f64 = 1e-9;

/// `min ½ vᵀHv + fᵀv s.t. Cv ≤ d` for one measured state.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constraints: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// `xᵀ M x`, the part of the cost that does not depend on `v`.
    pub constant: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QpSolution {
    #[serde(with = "crate::rows::vectors")]
    pub v_star: Vec<DVector<f64>>,
    #[serde(with = "crate::rows::vectors")]
    pub z_star: Vec<DVector<f64>>,
    /// Optimal cost without the disturbance-only constant.
    pub value: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Previous plan shifted by one step and corrected by the realized
/// disturbance through the feedback.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidatePlan {
    #[serde(with = "crate::rows::vectors")]
    pub inputs: Vec<DVector<f64>>,
    #[serde(with = "crate::rows::vectors")]
    pub states: Vec<DVector<f64>>,
    pub feasible: bool,
}

/// Sets entering the online problem besides the stage schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OnlineSets {
    /// Tightened terminal constraint `Z_f` on `z_T`.
    pub terminal: Polytope,
    /// Set the first predicted state must reach, if any.
    pub first_step: Option<Polytope>,
    /// Cross-section `S` of a rigid tube. When set, the nominal initial
    /// state becomes a decision variable with `x − z_0 ∈ S`, `z_0` must meet
    /// the stage-1 state rows, and the applied input is `v_0 + K(x − z_0)`.
    #[serde(default)]
    pub tube: Option<Polytope>,
}

/// Block row of constraints `normals · z_l ≤ offsets` (or on `v_l`).
#[derive(Clone, Debug)]
struct RowBlock {
    start: usize,
    len: usize,
}

#[derive(Clone, Debug)]
struct Condensed {
    /// Rows `l = 1 … T` of `A^l`, stacked (`nT × n`).
    phi: DMatrix<f64>,
    /// Lower block-triangular `A^{l−1−j} B` (`nT × mT`).
    gamma: DMatrix<f64>,
    hessian: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `f = cross · x`.
    cross: DMatrix<f64>,
    /// `xᵀ constant x`.
    constant: DMatrix<f64>,
    c: DMatrix<f64>,
    d0: DVector<f64>,
    /// `d = d0 − e · x`.
    e: DMatrix<f64>,
    /// Rows of the first-step set (excluded from candidate checks).
    first_step_rows: Option<RowBlock>,
    /// Leading decision entries holding `z_0` (zero without a tube).
    start_dims: usize,
}

/// Controller context: problem data plus the last optimal plan.
#[derive(Clone, Debug)]
pub struct Controller {
    sys: LtiSystem,
    gains: ControllerGains,
    schedule: TighteningSchedule,
    sets: OnlineSets,
    condensed: Condensed,
    plan: Option<QpSolution>,
    /// State the cached plan was computed at.
    planned_at: Option<DVector<f64>>,
}

impl Controller {
    pub fn new(
        sys: &LtiSystem,
        gains: &ControllerGains,
        cons: &ChanceConstraints,
        schedule: &TighteningSchedule,
        sets: OnlineSets,
    ) -> Result<Self> {
        let (n, m, t) = (sys.nx(), sys.nu(), sys.horizon);
        if schedule.horizon() != t || schedule.mu.len() != t {
            return Err(Error::DimensionMismatch("schedule length differs from the horizon".into()));
        }
        if sets.terminal.dim() != n || [&sets.first_step, &sets.tube].iter().any(|s| s.as_ref().is_some_and(|p| p.dim() != n)) {
            return Err(Error::DimensionMismatch("online sets must live in the state space".into()));
        }
        cons.validate(n, m)?;

        let mut phi = DMatrix::zeros(n * t, n);
        let mut power = DMatrix::identity(n, n);
        for l in 0..t {
            power = &sys.a * &power;
            phi.view_mut((l * n, 0), (n, n)).copy_from(&power);
        }
        let mut gamma = DMatrix::zeros(n * t, m * t);
        let mut ab = sys.b.clone();
        for k in 0..t {
            // Block (l, j) with l − 1 − j = k.
            for j in 0..t - k {
                let l = j + k;
                gamma.view_mut((l * n, j * m), (n, m)).copy_from(&ab);
            }
            ab = &sys.a * ab;
        }
        let mut qbar = DMatrix::zeros(n * t, n * t);
        for l in 0..t {
            let w = if l + 1 == t { &gains.terminal_weight } else { &sys.q };
            qbar.view_mut((l * n, l * n), (n, n)).copy_from(w);
        }
        let mut rbar = DMatrix::zeros(m * t, m * t);
        for l in 0..t {
            rbar.view_mut((l * m, l * m), (m, m)).copy_from(&sys.r);
        }
        let gq = gamma.transpose() * &qbar;
        let state_weight = phi.transpose() * &qbar * &phi + &sys.q;
        let cross = &gq * &phi * 2.0;
        let free = if sets.tube.is_some() { n } else { 0 };
        let dims = free + m * t;
        // Decision (z_0, v) with a tube: the cost is a quadratic form in
        // both and x only enters the constraints.
        let mut hessian = DMatrix::zeros(dims, dims);
        hessian.view_mut((free, free), (m * t, m * t)).copy_from(&((&gq * &gamma + &rbar) * 2.0));
        let (cross, constant) = if free > 0 {
            hessian.view_mut((0, 0), (n, n)).copy_from(&(&state_weight * 2.0));
            hessian.view_mut((free, 0), (m * t, n)).copy_from(&cross);
            hessian.view_mut((0, free), (n, m * t)).copy_from(&cross.transpose());
            (DMatrix::zeros(dims, n), DMatrix::zeros(n, n))
        } else {
            (cross, state_weight)
        };
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let chol = hessian.clone().cholesky().ok_or(Error::NotPositiveDefinite("condensed Hessian"))?;

        // Constraint rows: V_0 … V_{T−1}, Z_1 … Z_T, Z_f, first-step set,
        // then the tube rows.
        let mut blocks: Vec<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> = Vec::new();
        for l in 0..t {
            let g = &cons.input_normals;
            let mut cv = DMatrix::zeros(g.nrows(), dims);
            cv.view_mut((0, free + l * m), (g.nrows(), m)).copy_from(g);
            blocks.push((cv, DMatrix::zeros(g.nrows(), n), schedule.mu[l].clone()));
        }
        let state_block = |normals: &DMatrix<f64>, offsets: &DVector<f64>, l: usize| {
            let mut cv = DMatrix::zeros(normals.nrows(), dims);
            let to_state = if l == 0 { DMatrix::identity(n, n) } else { phi.rows((l - 1) * n, n).into_owned() };
            if l > 0 {
                cv.columns_mut(free, m * t).copy_from(&(normals * gamma.rows((l - 1) * n, n)));
            }
            if free > 0 {
                cv.columns_mut(0, n).copy_from(&(normals * &to_state));
                (cv, DMatrix::zeros(normals.nrows(), n), offsets.clone())
            } else {
                (cv, normals * to_state, offsets.clone())
            }
        };
        if free > 0 {
            blocks.push(state_block(&cons.state_normals, &schedule.eta[0], 0));
        }
        for l in 1..=t {
            blocks.push(state_block(&cons.state_normals, &schedule.eta[l - 1], l));
        }
        blocks.push(state_block(sets.terminal.normals(), sets.terminal.offsets(), t));
        let mut first_step_rows = None;
        if let Some(fs) = &sets.first_step {
            let start: usize = blocks.iter().map(|b| b.0.nrows()).sum();
            first_step_rows = Some(RowBlock {
                start,
                len: fs.n_rows(),
            });
            blocks.push(state_block(fs.normals(), fs.offsets(), 1));
        }
        if let Some(tube) = &sets.tube {
            // S(x − z_0) ≤ s  ⇔  −S z_0 ≤ s − S x.
            let mut cv = DMatrix::zeros(tube.n_rows(), dims);
            cv.columns_mut(0, n).copy_from(&(-tube.normals()));
            blocks.push((cv, tube.normals().clone(), tube.offsets().clone()));
        }
        let rows: usize = blocks.iter().map(|b| b.0.nrows()).sum();
        let mut c = DMatrix::zeros(rows, dims);
        let mut e = DMatrix::zeros(rows, n);
        let mut d0 = DVector::zeros(rows);
        let mut at = 0;
        for (cv, ev, o) in &blocks {
            let r = cv.nrows();
            c.rows_mut(at, r).copy_from(cv);
            e.rows_mut(at, r).copy_from(ev);
            d0.rows_mut(at, r).copy_from(o);
            at += r;
        }
        Ok(Self {
            sys: sys.clone(),
            gains: gains.clone(),
            schedule: schedule.clone(),
            sets,
            condensed: Condensed {
                phi,
                gamma,
                hessian,
                chol,
                cross,
                constant,
                c,
                d0,
                e,
                first_step_rows,
                start_dims: free,
            },
            plan: None,
            planned_at: None,
        })
    }

    pub fn system(&self) -> &LtiSystem {
        &self.sys
    }

    pub fn gains(&self) -> &ControllerGains {
        &self.gains
    }

    pub fn schedule(&self) -> &TighteningSchedule {
        &self.schedule
    }

    pub fn sets(&self) -> &OnlineSets {
        &self.sets
    }

    /// Last optimal plan, if any.
    pub fn plan(&self) -> Option<&QpSolution> {
        self.plan.as_ref()
    }

    pub fn reset(&mut self) {
        self.plan = None;
        self.planned_at = None;
    }

    /// Condensed QP at the measured state `x`.
    pub fn build_qp(&self, x: &DVector<f64>) -> Result<QpProblem> {
        if x.len() != self.sys.nx() {
            return Err(Error::DimensionMismatch(format!("state has {} entries, expected {}", x.len(), self.sys.nx())));
        }
        let cd = &self.condensed;
        Ok(QpProblem {
            hessian: cd.hessian.clone(),
            linear: &cd.cross * x,
            constraints: cd.c.clone(),
            rhs: &cd.d0 - &cd.e * x,
            constant: x.dot(&(&cd.constant * x)),
        })
    }

    /// Solves the online problem at `x` without touching the cached plan.
    pub fn solve(&self, x: &DVector<f64>) -> Result<QpSolution> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadParams("state must be finite".into()));
        }
        let qp = self.build_qp(x)?;
        let cd = &self.condensed;
        let r = qp::solve_factored(&qp.hessian, &cd.chol, &qp.linear, &qp.constraints, &qp.rhs);
        let (n, m, t) = (self.sys.nx(), self.sys.nu(), self.sys.horizon);
        let free = cd.start_dims;
        let v = r.x.rows(free, m * t).into_owned();
        let v_star: Vec<DVector<f64>> = (0..t).map(|l| v.rows(l * m, m).into_owned()).collect();
        let z0 = if free > 0 { r.x.rows(0, n).into_owned() } else { x.clone() };
        let stacked = &cd.phi * &z0 + &cd.gamma * &v;
        let mut z_star = Vec::with_capacity(t + 1);
        z_star.push(z0);
        z_star.extend((0..t).map(|l| stacked.rows(l * n, n).into_owned()));
        Ok(QpSolution {
            v_star,
            z_star,
            value: r.value + qp.constant,
            status: r.status,
            kkt_residual: r.kkt_residual,
            iterations: r.iterations,
        })
    }

    /// One receding-horizon step: solve at `x`, cache the plan and return
    /// `u = v*_0` (plus `K(x − z*_0)` with a tube). An infeasible problem
    /// clears the cache and is an error.
    pub fn mpc_step(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, QpSolution)> {
        let sol = self.solve(x)?;
        if sol.status == QpStatus::Infeasible {
            self.reset();
            return Err(Error::Infeasible);
        }
        let u = &sol.v_star[0] + &self.gains.gain * (x - &sol.z_star[0]);
        self.plan = Some(sol.clone());
        self.planned_at = Some(x.clone());
        Ok((u, sol))
    }

    /// Shifted plan `ṽ_i = v_{i+1} + K A_cl^i B_w w` for `i < T − 1` and
    /// `ṽ_{T−1} = K (z_T + A_cl^{T−1} B_w w)`, checked against the stage
    /// schedule and `Z_f` at the successor state `z_1 + B_w w`. With a tube
    /// the candidate is the plain shift started at `z_1`.
    pub fn candidate_shift(&self, w: &DVector<f64>) -> Option<CandidatePlan> {
        let plan = self.plan.as_ref()?;
        let t = self.sys.horizon;
        let k = &self.gains.gain;
        if self.condensed.start_dims > 0 {
            let mut inputs: Vec<DVector<f64>> = plan.v_star[1..].to_vec();
            inputs.push(k * &plan.z_star[t]);
            let start = plan.z_star[1].clone();
            let x = self.planned_at.as_ref()?;
            let x_next = &plan.z_star[1] + &self.gains.closed_loop * (x - &plan.z_star[0]) + &self.sys.bw * w;
            let states = self.sys.nominal_rollout(&start, &inputs);
            let feasible = self.check_decision(&x_next, Some(&start), &inputs);
            return Some(CandidatePlan { inputs, states, feasible });
        }
        let mut prop = &self.sys.bw * w;
        let mut inputs = Vec::with_capacity(t);
        for i in 0..t - 1 {
            inputs.push(&plan.v_star[i + 1] + k * &prop);
            prop = &self.gains.closed_loop * prop;
        }
        inputs.push(k * (&plan.z_star[t] + &prop));
        let x_next = &plan.z_star[1] + &self.sys.bw * w;
        let states = self.sys.nominal_rollout(&x_next, &inputs);
        let feasible = self.check_plan(&x_next, &inputs);
        Some(CandidatePlan { inputs, states, feasible })
    }

    /// Whether `inputs` satisfy every row of the problem at `x` except the
    /// first-step set.
    pub fn check_plan(&self, x: &DVector<f64>, inputs: &[DVector<f64>]) -> bool {
        self.check_decision(x, None, inputs)
    }

    fn check_decision(&self, x: &DVector<f64>, start: Option<&DVector<f64>>, inputs: &[DVector<f64>]) -> bool {
        let cd = &self.condensed;
        let m = self.sys.nu();
        let free = cd.start_dims;
        let mut v = DVector::zeros(free + m * inputs.len());
        if let (true, Some(z0)) = (free > 0, start) {
            v.rows_mut(0, free).copy_from(z0);
        }
        for (l, vi) in inputs.iter().enumerate() {
            v.rows_mut(free + l * m, m).copy_from(vi);
        }
        let lhs = &cd.c * v;
        let rhs = &cd.d0 - &cd.e * x;
        let skip = cd.first_step_rows.as_ref().map_or(0..0, |b| b.start..b.start + b.len);
        (0..lhs.len()).filter(|j| !skip.contains(j)).all(|j| {
            let scale = cd.c.row(j).norm().max(1.0);
            lhs[j] <= rhs[j] + CANDIDATE_TOL * scale
        })
    }

    pub fn n_constraints(&self) -> usize {
        self.condensed.c.nrows()
    }
}
