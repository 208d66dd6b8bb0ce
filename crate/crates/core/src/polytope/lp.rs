//! Dense simplex for small linear programs `max cᵀx s.t. Ax ≤ b`, `x` free.
//!
//! The primal has few variables (the ambient dimension of a polytope, at most
//! a handful) and possibly many rows, so the solver runs the two-phase simplex
//! on the dual `min bᵀy s.t. Aᵀy = c, y ≥ 0`. The tableau then has one row per
//! primal variable, which keeps every pivot cheap. Entering and leaving
//! variables follow Bland's rule, so the method cannot cycle and the pivot
//! sequence is deterministic.
//!
//! The primal optimizer is recovered from the simplex multipliers of the
//! equality rows (read off the reduced costs of the artificial columns).

use nalgebra::{DMatrix, DVector};

const COST_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-11;
const PHASE1_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, point: DVector<f64> },
    /// `certificate` is a Farkas vector `y ≥ 0` with `Aᵀy = 0` and `bᵀy < 0`,
    /// expressed for the caller's (unnormalized) rows.
    Infeasible { certificate: DVector<f64> },
    Unbounded,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

/// Maximize `objective · x` subject to `normals · x ≤ offsets`.
pub fn maximize(normals: &DMatrix<f64>, offsets: &DVector<f64>, objective: &DVector<f64>) -> LpOutcome {
    let rows = normals.nrows();
    let dim = normals.ncols();
    assert_eq!(offsets.len(), rows);
    assert_eq!(objective.len(), dim);

    // Unit-norm rows keep the tableau well scaled. Zero rows are either
    // vacuous (offset ≥ 0) or make the problem infeasible.
    let mut a = normals.clone();
    let mut b = offsets.clone();
    let mut scale = vec![1.0; rows];
    for i in 0..rows {
        let norm = a.row(i).norm();
        if norm < 1e-14 {
            if b[i] < -PHASE1_TOL {
                let mut cert = DVector::zeros(rows);
                cert[i] = 1.0;
                return LpOutcome::Infeasible { certificate: cert };
            }
            // Mark as vacuous: zero normal, large offset never binds.
            for j in 0..dim {
                a[(i, j)] = 0.0;
            }
            b[i] = 0.0;
            scale[i] = 0.0;
            continue;
        }
        a.row_mut(i).scale_mut(1.0 / norm);
        b[i] /= norm;
        scale[i] = norm;
    }

    let c_norm = objective.norm();
    if c_norm < 1e-300 {
        return match solve_dual(&a, &b, &DVector::zeros(dim)) {
            DualResult::Optimal { point, .. } => LpOutcome::Optimal { value: 0.0, point },
            DualResult::Unbounded(ray) => LpOutcome::Infeasible {
                certificate: unscale(ray, &scale),
            },
            DualResult::Infeasible => unreachable!("zero objective always admits y = 0"),
        };
    }
    let c = objective / c_norm;
    match solve_dual(&a, &b, &c) {
        DualResult::Optimal { value, point } => LpOutcome::Optimal {
            value: value * c_norm,
            point,
        },
        DualResult::Unbounded(ray) => LpOutcome::Infeasible {
            certificate: unscale(ray, &scale),
        },
        DualResult::Infeasible => match solve_dual(&a, &b, &DVector::zeros(dim)) {
            DualResult::Unbounded(ray) => LpOutcome::Infeasible {
                certificate: unscale(ray, &scale),
            },
            _ => LpOutcome::Unbounded,
        },
    }
}

/// A feasible point of `normals · x ≤ offsets`, or a Farkas certificate.
pub fn feasible_point(normals: &DMatrix<f64>, offsets: &DVector<f64>) -> LpOutcome {
    maximize(normals, offsets, &DVector::zeros(normals.ncols()))
}

fn unscale(mut ray: DVector<f64>, scale: &[f64]) -> DVector<f64> {
    for (y, s) in ray.iter_mut().zip(scale) {
        if *s > 0.0 {
            *y /= s;
        } else {
            *y = 0.0;
        }
    }
    ray
}

enum DualResult {
    Optimal { value: f64, point: DVector<f64> },
    Infeasible,
    Unbounded(DVector<f64>),
}

struct Tableau {
    /// `dim` rows, `rows + dim + 1` columns; last column is the right-hand side.
    t: Vec<f64>,
    width: usize,
    height: usize,
    basis: Vec<usize>,
}

impl Tableau {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * self.width + c]
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.width;
        let p = self.t[pr * w + pc];
        for c in 0..w {
            self.t[pr * w + c] /= p;
        }
        for r in 0..self.height {
            if r == pr {
                continue;
            }
            let f = self.t[r * w + pc];
            if f != 0.0 {
                for c in 0..w {
                    let v = self.t[pr * w + c];
                    if v != 0.0 {
                        self.t[r * w + c] -= f * v;
                    }
                }
            }
        }
        self.basis[pr] = pc;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut rc = cost.to_vec();
        for r in 0..self.height {
            let cb = cost[self.basis[r]];
            if cb != 0.0 {
                for (c, v) in rc.iter_mut().enumerate().take(self.width - 1) {
                    *v -= cb * self.at(r, c);
                }
            }
        }
        rc
    }

    /// Runs Bland-rule simplex iterations minimizing `cost` over columns
    /// `0..enter_limit`. Returns `Err(column)` if that column is an unbounded
    /// direction.
    fn run(&mut self, cost: &[f64], enter_limit: usize) -> Result<(), usize> {
        let rhs = self.width - 1;
        let mut rc = self.reduced_costs(cost);
        // Bland's rule terminates, the cap only guards against numerical loops.
        let cap = 50 * (self.width + self.height) + 1000;
        for _ in 0..cap {
            let Some(enter) = (0..enter_limit).find(|&c| rc[c] < -COST_TOL) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.height {
                let coef = self.at(r, enter);
                if coef > PIVOT_TOL {
                    let ratio = self.at(r, rhs).max(0.0) / coef;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            let tie = (ratio - lratio).abs() <= 1e-12 * (1.0 + lratio.abs());
                            if ratio < lratio && !tie || tie && self.basis[r] < self.basis[lr] {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((pr, _)) = leave else {
                return Err(enter);
            };
            self.pivot(pr, enter);
            // Update reduced costs with the pivot row.
            let f = rc[enter];
            for (c, v) in rc.iter_mut().enumerate().take(self.width - 1) {
                *v -= f * self.at(pr, c);
            }
        }
        log::warn!("simplex iteration cap reached");
        Ok(())
    }
}

/// Simplex on `min bᵀy, Aᵀy = c, y ≥ 0` where `a` has unit (or zero) rows.
fn solve_dual(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>) -> DualResult {
    let m = a.nrows();
    let d = a.ncols();
    let width = m + d + 1;
    let mut t = vec![0.0; d * width];
    let mut sign = vec![1.0; d];
    for k in 0..d {
        if c[k] < 0.0 {
            sign[k] = -1.0;
        }
        for j in 0..m {
            t[k * width + j] = sign[k] * a[(j, k)];
        }
        t[k * width + m + k] = 1.0;
        t[k * width + width - 1] = sign[k] * c[k];
    }
    let mut tab = Tableau {
        t,
        width,
        height: d,
        basis: (m..m + d).collect(),
    };

    // Phase 1: minimize the sum of artificials.
    let mut cost1 = vec![0.0; width - 1];
    for v in cost1.iter_mut().skip(m) {
        *v = 1.0;
    }
    let _ = tab.run(&cost1, m);
    let infeas: f64 = (0..d)
        .filter(|&r| tab.basis[r] >= m)
        .map(|r| tab.at(r, width - 1))
        .sum();
    if infeas > PHASE1_TOL {
        return DualResult::Infeasible;
    }
    // Drive zero-level artificials out of the basis where possible.
    for r in 0..d {
        if tab.basis[r] >= m {
            if let Some(c) = (0..m).find(|&c| tab.at(r, c).abs() > 1e-9) {
                tab.pivot(r, c);
            }
        }
    }

    // Phase 2.
    let mut cost2 = vec![0.0; width - 1];
    cost2[..m].copy_from_slice(b.as_slice());
    if let Err(col) = tab.run(&cost2, m) {
        let mut ray = DVector::zeros(m);
        ray[col] = 1.0;
        for r in 0..d {
            let bv = tab.basis[r];
            if bv < m {
                ray[bv] = -tab.at(r, col);
            }
        }
        return DualResult::Unbounded(ray);
    }

    let rc = tab.reduced_costs(&cost2);
    let mut value = 0.0;
    for r in 0..d {
        let bv = tab.basis[r];
        if bv < m {
            value += b[bv] * tab.at(r, width - 1);
        }
    }
    let point = DVector::from_fn(d, |k, _| -rc[m + k] * sign[k]);
    DualResult::Optimal { value, point }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use nalgebra::dvector;

    fn unit_box() -> (DMatrix<f64>, DVector<f64>) {
        (
            dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0; 0.0, -1.0],
            dvector![1.0, 1.0, 1.0, 1.0],
        )
    }

    #[test]
    fn box_support() {
        let (a, b) = unit_box();
        match maximize(&a, &b, &dvector![1.0, 1.0]) {
            LpOutcome::Optimal { value, point } => {
                assert!((value - 2.0).abs() < 1e-12);
                assert!((point - dvector![1.0, 1.0]).norm() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unbounded_and_infeasible() {
        let a = dmatrix![1.0, 0.0];
        let b = dvector![1.0];
        assert_eq!(maximize(&a, &b, &dvector![0.0, 1.0]), LpOutcome::Unbounded);

        let a = dmatrix![1.0; -1.0];
        let b = dvector![-1.0, -1.0];
        match maximize(&a, &b, &dvector![1.0]) {
            LpOutcome::Infeasible { certificate } => {
                assert!(certificate.iter().all(|&y| y >= 0.0));
                assert!((a.transpose() * &certificate).norm() < 1e-12);
                assert!(b.dot(&certificate) < 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn no_rows() {
        let a = DMatrix::<f64>::zeros(0, 2);
        let b = DVector::<f64>::zeros(0);
        assert_eq!(maximize(&a, &b, &dvector![1.0, 0.0]), LpOutcome::Unbounded);
        assert!(matches!(feasible_point(&a, &b), LpOutcome::Optimal { .. }));
    }

    #[test]
    fn degenerate_vertex() {
        // Many constraints through the optimal vertex (1, 1).
        let a = dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0; 2.0, 1.0; 1.0, 2.0; -1.0, 0.0; 0.0, -1.0];
        let b = dvector![1.0, 1.0, 2.0, 3.0, 3.0, 0.0, 0.0];
        let out = maximize(&a, &b, &dvector![1.0, 1.0]);
        assert!((out.value().unwrap() - 2.0).abs() < 1e-12);
    }
}
