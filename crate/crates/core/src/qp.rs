//! Dense strictly convex QP `min ½ xᵀHx + fᵀx s.t. Cx ≤ d` by the
//! Goldfarb–Idnani dual active-set method.
//!
//! The iteration starts at the unconstrained minimizer and adds one violated
//! constraint at a time, dropping active constraints whose multipliers would
//! turn negative. Every iterate is dual feasible, so the first primal
//! feasible iterate is optimal. When a violated constraint cannot be added
//! (no primal direction and no multiplier to release) the problem is
//! infeasible; a phase-1 LP then supplies a Farkas certificate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::polytope::lp::{self, LpOutcome};

pub const MAX_ITERATIONS: usize = 10_000;
/// Violation allowed on a unit-normalized row before it enters the active set.
const FEAS_TOL: f64 = 1e-10;
const ZERO_STEP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct QpResult {
    pub x: DVector<f64>,
    pub value: f64,
    /// One multiplier per constraint row (zero for inactive rows).
    pub multipliers: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Farkas vector `y ≥ 0`, `Cᵀy = 0`, `dᵀy < 0` for infeasible problems.
    pub certificate: Option<DVector<f64>>,
}

/// Solves `min ½ xᵀHx + fᵀx s.t. Cx ≤ d` for positive definite `H`.
/// Returns `None` when `H` is not positive definite.
pub fn solve(h: &DMatrix<f64>, f: &DVector<f64>, c: &DMatrix<f64>, d: &DVector<f64>) -> Option<QpResult> {
    let chol = h.clone().cholesky()?;
    Some(solve_factored(h, &chol, f, c, d))
}

/// As [`solve`] with a precomputed Cholesky factor of `H`.
pub fn solve_factored(
    h: &DMatrix<f64>,
    chol: &Cholesky<f64, Dyn>,
    f: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
) -> QpResult {
    let rows = c.nrows();
    // Unit-normalized copies; zero rows are checked directly.
    let mut cn = c.clone();
    let mut dn = d.clone();
    let mut scale = vec![1.0; rows];
    let mut trivially_infeasible = false;
    for j in 0..rows {
        let norm = c.row(j).norm();
        if norm > 0.0 {
            scale[j] = norm;
            cn.row_mut(j).scale_mut(1.0 / norm);
            dn[j] /= norm;
        } else if d[j] < -FEAS_TOL {
            trivially_infeasible = true;
        }
    }
    let mut x = -chol.solve(f);
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut iterations = 0usize;

    let finish = |x: DVector<f64>, active: &[usize], lambda: &[f64], status: QpStatus, iterations: usize| {
        let mut multipliers = DVector::zeros(rows);
        for (&j, &l) in active.iter().zip(lambda) {
            multipliers[j] = l / scale[j];
        }
        let value = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
        let kkt_residual = kkt_residual(h, f, c, d, &x, &multipliers);
        QpResult {
            x,
            value,
            multipliers,
            status,
            kkt_residual,
            iterations,
            certificate: None,
        }
    };

    if trivially_infeasible {
        return infeasible(finish(x, &active, &lambda, QpStatus::Infeasible, 0), c, d);
    }

    loop {
        // Most violated row, lowest index on ties.
        let mut pick: Option<(usize, f64)> = None;
        for j in 0..rows {
            if active.contains(&j) || scale[j] == 0.0 {
                continue;
            }
            let viol = cn.row(j).dot(&x.transpose()) - dn[j];
            if viol > FEAS_TOL * (1.0 + dn[j].abs()) && pick.is_none_or(|(_, v)| viol > v) {
                pick = Some((j, viol));
            }
        }
        let Some((p, _)) = pick else {
            return finish(x, &active, &lambda, QpStatus::Optimal, iterations);
        };
        let cp = cn.row(p).transpose();
        let mut lambda_p = 0.0;
        loop {
            iterations += 1;
            if iterations > MAX_ITERATIONS {
                return finish(x, &active, &lambda, QpStatus::MaxIterations, iterations);
            }
            let (z, r) = directions(chol, &cn, &active, &cp);
            // Multipliers move as λ_A + t r; the first to hit zero limits t.
            let mut partial: Option<(usize, f64)> = None;
            for (k, (&l, &rk)) in lambda.iter().zip(r.iter()).enumerate() {
                if rk < 0.0 {
                    let t = l / -rk;
                    if partial.is_none_or(|(_, best)| t < best) {
                        partial = Some((k, t));
                    }
                }
            }
            let slope = cp.dot(&z);
            let hinv_cp_norm = chol.solve(&cp).norm();
            let full = if z.norm() > ZERO_STEP * hinv_cp_norm.max(1.0) && slope < 0.0 {
                Some((cp.dot(&x) - dn[p]) / -slope)
            } else {
                None
            };
            match (full, partial) {
                (None, None) => {
                    return infeasible(finish(x, &active, &lambda, QpStatus::Infeasible, iterations), c, d);
                }
                (Some(t2), partial) if partial.is_none_or(|(_, t1)| t2 <= t1) => {
                    x += &z * t2;
                    for (l, rk) in lambda.iter_mut().zip(r.iter()) {
                        *l = (*l + t2 * rk).max(0.0);
                    }
                    active.push(p);
                    lambda.push(lambda_p + t2);
                    break;
                }
                (full, Some((k, t1))) => {
                    if full.is_some() {
                        x += &z * t1;
                    }
                    for (l, rk) in lambda.iter_mut().zip(r.iter()) {
                        *l += t1 * rk;
                    }
                    lambda_p += t1;
                    active.remove(k);
                    lambda.remove(k);
                }
                (Some(_), None) => unreachable!("guarded by the previous arm"),
            }
        }
    }
}

/// Primal step `z = −H⁻¹(c_p + N r)` and multiplier rates `r` with `Nᵀz = 0`.
fn directions(chol: &Cholesky<f64, Dyn>, cn: &DMatrix<f64>, active: &[usize], cp: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let hinv_cp = chol.solve(cp);
    if active.is_empty() {
        return (-hinv_cp, DVector::zeros(0));
    }
    let n = cp.len();
    let mut nmat = DMatrix::zeros(n, active.len());
    for (k, &j) in active.iter().enumerate() {
        nmat.column_mut(k).copy_from(&cn.row(j).transpose());
    }
    let hinv_n = chol.solve(&nmat);
    let m = nmat.transpose() * &hinv_n;
    let rhs = nmat.transpose() * &hinv_cp;
    let r = match m.clone().cholesky() {
        Some(mc) => -mc.solve(&rhs),
        None => -m.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(active.len())),
    };
    let z = -(hinv_cp + hinv_n * &r);
    (z, r)
}

fn infeasible(mut result: QpResult, c: &DMatrix<f64>, d: &DVector<f64>) -> QpResult {
    match lp::feasible_point(c, d) {
        LpOutcome::Infeasible { certificate } => result.certificate = Some(certificate),
        _ => log::warn!("QP active-set method reported infeasibility that phase 1 could not certify"),
    }
    result
}

/// Largest of the scaled stationarity residual, primal violation,
/// multiplier negativity and complementarity gap.
pub fn kkt_residual(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    x: &DVector<f64>,
    multipliers: &DVector<f64>,
) -> f64 {
    let grad = h * x + f + c.transpose() * multipliers;
    let scale = 1.0 + f.amax() + (h * x).amax();
    let mut res = grad.amax() / scale;
    let slack = d - c * x;
    for j in 0..c.nrows() {
        let norm = c.row(j).norm().max(1e-300);
        res = res.max(-slack[j] / norm);
        res = res.max(-multipliers[j]);
        res = res.max((multipliers[j] * slack[j]).abs() / scale);
    }
    res
}
