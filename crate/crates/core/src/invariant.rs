//! Invariant-set computations: terminal set, outer bound of the minimal
//! robust positively invariant set, the `T`-step set of the nominal problem
//! and its robust control invariant subset.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{ControllerGains, LtiSystem};
use crate::polytope::{Polytope, EQUALITY_TOL};
use crate::tightening::{ChanceConstraints, TighteningSchedule};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct InvariantOptions {
    /// Support-metric tolerance of the fixed-point tests.
    pub fixed_point_tol: f64,
    pub terminal_cap: usize,
    pub rci_cap: usize,
    /// Relative accuracy of the minimal-RPI outer bound.
    pub mrpi_accuracy: f64,
    pub mrpi_cap: usize,
    /// Normals used to express the minimal-RPI outer bound (2-D: uniform
    /// angles).
    pub mrpi_facets: usize,
}

impl Default for InvariantOptions {
    fn default() -> Self {
        Self {
            fixed_point_tol: EQUALITY_TOL,
            terminal_cap: 500,
            rci_cap: 200,
            mrpi_accuracy: 1e-3,
            mrpi_cap: 200,
            mrpi_facets: 8,
        }
    }
}

/// Terminal set with the number of backward iterations it took.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TerminalSet {
    pub set: Polytope,
    pub iterations: usize,
}

/// `{x | H A_cl x ≤ η_1, G K x ≤ g}`: states where the feedback keeps the
/// next state inside the tightened first-step constraint and the input
/// inside its hard bound.
pub fn terminal_candidate(gains: &ControllerGains, cons: &ChanceConstraints, eta_1: &DVector<f64>) -> Result<Polytope> {
    let hn = &cons.state_normals * &gains.closed_loop;
    let gk = &cons.input_normals * &gains.gain;
    let n = gains.closed_loop.nrows();
    let (p, q) = (hn.nrows(), gk.nrows());
    let mut normals = DMatrix::zeros(p + q, n);
    normals.rows_mut(0, p).copy_from(&hn);
    normals.rows_mut(p, q).copy_from(&gk);
    let mut offsets = DVector::zeros(p + q);
    offsets.rows_mut(0, p).copy_from(eta_1);
    offsets.rows_mut(p, q).copy_from(&cons.input_offsets);
    Ok(Polytope::new(normals, offsets)?.reduce())
}

/// Maximal robust positively invariant subset of `candidate` for
/// `x⁺ = A_cl x + B_w w`, `w ∈ W`: iterate
/// `Ω ← Ω ∩ A_cl⁻¹(Ω ⊖ B_w W)` until the set stops shrinking.
pub fn terminal_set(
    gains: &ControllerGains,
    bw: &DMatrix<f64>,
    disturbance: &Polytope,
    candidate: &Polytope,
    opts: &InvariantOptions,
) -> Result<TerminalSet> {
    let n = gains.closed_loop.nrows();
    let mut omega = candidate.reduce();
    if omega.is_empty() {
        return Err(Error::EmptyTerminalSet);
    }
    for it in 1..=opts.terminal_cap {
        let eroded = omega.pontryagin_diff_image(disturbance, bw)?;
        if eroded.is_empty() {
            return Err(Error::EmptyTerminalSet);
        }
        let pre = eroded.affine_preimage(&gains.closed_loop, &DVector::zeros(n))?;
        let next = omega.intersect(&pre)?.reduce();
        if next.is_empty() {
            return Err(Error::EmptyTerminalSet);
        }
        if next.contains(&omega, opts.fixed_point_tol) {
            return Ok(TerminalSet { set: next, iterations: it });
        }
        omega = next;
    }
    Err(Error::NonConvergence {
        what: "terminal set",
        cap: opts.terminal_cap,
    })
}

/// Checks `A_cl S ⊕ B_w W ⊆ S` row by row through support functions.
pub fn is_robust_invariant(
    set: &Polytope,
    closed_loop: &DMatrix<f64>,
    bw: &DMatrix<f64>,
    disturbance: &Polytope,
    tol: f64,
) -> Result<bool> {
    for i in 0..set.n_rows() {
        let d = set.normals().row(i).transpose();
        let reach = set.support_image(closed_loop, &d)? + disturbance.support_image(bw, &d)?;
        if reach > set.offsets()[i] + tol * d.norm().max(1.0) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Unit normals for fixed-budget outer descriptions: uniform angles in 2-D,
/// otherwise the axes and the pairwise diagonals.
pub fn outer_normals(dim: usize, facets: usize) -> DMatrix<f64> {
    if dim == 2 {
        let f = facets.max(3);
        return DMatrix::from_fn(f, 2, |k, j| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / f as f64;
            if j == 0 {
                t.cos()
            } else {
                t.sin()
            }
        });
    }
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(dim);
            e[i] = s;
            rows.push(e);
        }
    }
    for i in 0..dim {
        for j in i + 1..dim {
            for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut e = DVector::zeros(dim);
                e[i] = a / 2f64.sqrt();
                e[j] = b / 2f64.sqrt();
                rows.push(e);
            }
        }
    }
    DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j])
}

/// Outer bound of the minimal RPI set together with the truncation data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MrpiBound {
    pub set: Polytope,
    pub terms: usize,
    pub contraction: f64,
}

/// Outer bound of `⊕_{i≥0} A_cl^i B_w W`.
///
/// With a full-dimensional `V ⊇ B_w W` (the image itself when `B_w` is
/// invertible, otherwise a slightly inflated bounding box) and the smallest
/// `s` with `A_cl^s V ⊆ α V`, the set `(1 − α)⁻¹ ⊕_{i<s} A_cl^i V` is
/// robust positively invariant and contains the minimal RPI set. Up to three
/// dimensions the sum is formed exactly from vertices. Above that, its
/// supports along a fixed set of normals give a polytope whose offsets are
/// raised until it is itself invariant.
pub fn mrpi_outer(gains: &ControllerGains, bw: &DMatrix<f64>, disturbance: &Polytope, opts: &InvariantOptions) -> Result<MrpiBound> {
    let acl = &gains.closed_loop;
    let n = acl.nrows();
    let (lo, hi) = disturbance.bounding_box()?;
    if (&hi - &lo).amax() <= opts.fixed_point_tol {
        // A single disturbance value has the fixed point as its mRPI set.
        let w = (&lo + &hi) * 0.5;
        let x = (DMatrix::identity(n, n) - acl).lu().solve(&(bw * w)).ok_or(Error::NotSchur(gains.spectral_radius))?;
        return Ok(MrpiBound {
            set: Polytope::point(x.as_slice()),
            terms: 0,
            contraction: 0.0,
        });
    }
    let v = state_space_disturbance(bw, disturbance)?;
    let mut power = DMatrix::identity(n, n);
    let mut choice: Option<(usize, f64)> = None;
    let target = opts.mrpi_accuracy / (1.0 + opts.mrpi_accuracy);
    for s in 1..=opts.mrpi_cap {
        power = acl * &power;
        let mut alpha: f64 = 0.0;
        for i in 0..v.n_rows() {
            let d = v.normals().row(i).transpose();
            alpha = alpha.max(v.support_image(&power, &d)? / v.offsets()[i]);
        }
        if alpha < 1.0 && choice.is_none_or(|(_, a)| alpha < a) {
            choice = Some((s, alpha));
        }
        if alpha <= target {
            break;
        }
    }
    let Some((terms, alpha)) = choice else {
        return Err(Error::NonContractive(opts.mrpi_cap));
    };
    if alpha > target {
        log::warn!("minimal RPI bound: contraction {alpha:.3e} after {terms} terms exceeds the accuracy target");
    }
    let scale = 1.0 / (1.0 - alpha);
    let set = if n <= 3 {
        vertex_sum(acl, &v, terms)?.scale(scale)
    } else {
        raised_outer(acl, bw, disturbance, &v, terms, scale, opts)?
    };
    Ok(MrpiBound {
        set,
        terms,
        contraction: alpha,
    })
}

/// `⊕_{i<terms} A^i V` as the hull of summed vertices.
fn vertex_sum(acl: &DMatrix<f64>, v: &Polytope, terms: usize) -> Result<Polytope> {
    let n = acl.nrows();
    let base = v.vertices()?;
    let mut points = base.clone();
    let mut power = DMatrix::identity(n, n);
    for _ in 1..terms {
        power = acl * &power;
        let image: Vec<DVector<f64>> = base.iter().map(|x| &power * x).collect();
        let sums: Vec<DVector<f64>> = points.iter().flat_map(|p| image.iter().map(move |q| p + q)).collect();
        let hull = crate::polytope::geometry::hull(&sums, n).ok_or(Error::EmptySet)?;
        points = hull.vertices()?;
    }
    Ok(crate::polytope::geometry::hull(&points, n).ok_or(Error::EmptySet)?.reduce())
}

fn raised_outer(
    acl: &DMatrix<f64>,
    bw: &DMatrix<f64>,
    disturbance: &Polytope,
    v: &Polytope,
    terms: usize,
    scale: f64,
    opts: &InvariantOptions,
) -> Result<Polytope> {
    let n = acl.nrows();
    let normals = outer_normals(n, opts.mrpi_facets);
    let mut offsets = DVector::zeros(normals.nrows());
    for j in 0..normals.nrows() {
        let d = normals.row(j).transpose();
        let mut p = DMatrix::identity(n, n);
        let mut total = 0.0;
        for _ in 0..terms {
            total += v.support_image(&p, &d)?;
            p = acl * &p;
        }
        offsets[j] = scale * total;
    }
    // Raise offsets until A_cl Y ⊕ B_w W ⊆ Y.
    let mut set = Polytope::new(normals.clone(), offsets)?;
    for _ in 0..opts.mrpi_cap {
        let mut raised = set.offsets().clone();
        let mut grew = false;
        for j in 0..normals.nrows() {
            let d = normals.row(j).transpose();
            let reach = set.support_image(acl, &d)? + disturbance.support_image(bw, &d)?;
            if reach > raised[j] + opts.fixed_point_tol * raised[j].abs().max(1.0) {
                raised[j] = reach;
                grew = true;
            }
        }
        set = Polytope::new(normals.clone(), raised)?;
        if !grew {
            return Ok(set);
        }
    }
    Err(Error::NonConvergence {
        what: "minimal RPI outer bound",
        cap: opts.mrpi_cap,
    })
}

fn state_space_disturbance(bw: &DMatrix<f64>, disturbance: &Polytope) -> Result<Polytope> {
    let n = bw.nrows();
    if bw.ncols() == n {
        if let Some(inv) = bw.clone().try_inverse() {
            return Polytope::new(disturbance.normals() * inv, disturbance.offsets().clone());
        }
    }
    let mut lo = vec![0.0; n];
    let mut hi = vec![0.0; n];
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        hi[i] = disturbance.support_image(bw, &e)? + 1e-6;
        e[i] = -1.0;
        lo[i] = -disturbance.support_image(bw, &e)? - 1e-6;
    }
    Polytope::from_box(&lo, &hi)
}

/// Largest `λ` with `X_∞ ⊕ λ·ball ⊆ X_f`.
pub fn lambda_margin(terminal: &Polytope, mrpi: &Polytope) -> Result<f64> {
    let mut lambda = f64::INFINITY;
    for i in 0..terminal.n_rows() {
        let d = terminal.normals().row(i).transpose();
        let norm = d.norm();
        if norm == 0.0 {
            continue;
        }
        lambda = lambda.min((terminal.offsets()[i] - mrpi.support(&d)?) / norm);
    }
    Ok(lambda)
}

/// Stage sets `S_l` of the backward recursion and the lifted set `C_T`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TStepSet {
    /// `C_T ⊆ ℝ^{n+m}` over `(x, v_0)`.
    pub lifted: Polytope,
    /// `S_1 … S_T`: nominal states at stage `l` from which the remaining
    /// constraints can be met.
    pub stages: Vec<Polytope>,
}

/// `{(z, v) | G v ≤ μ, A z + B v ∈ next}` with `H z ≤ η` when given.
fn lifted_stage(
    sys: &LtiSystem,
    state: Option<(&DMatrix<f64>, &DVector<f64>)>,
    input: (&DMatrix<f64>, &DVector<f64>),
    next: &Polytope,
) -> Result<Polytope> {
    let (n, m) = (sys.nx(), sys.nu());
    let p = state.map_or(0, |(h, _)| h.nrows());
    let q = input.0.nrows();
    let r = next.n_rows();
    let mut normals = DMatrix::zeros(p + q + r, n + m);
    let mut offsets = DVector::zeros(p + q + r);
    if let Some((h, eta)) = state {
        normals.view_mut((0, 0), (p, n)).copy_from(h);
        offsets.rows_mut(0, p).copy_from(eta);
    }
    normals.view_mut((p, n), (q, m)).copy_from(input.0);
    offsets.rows_mut(p, q).copy_from(input.1);
    normals.view_mut((p + q, 0), (r, n)).copy_from(&(next.normals() * &sys.a));
    normals.view_mut((p + q, n), (r, m)).copy_from(&(next.normals() * &sys.b));
    offsets.rows_mut(p + q, r).copy_from(next.offsets());
    Polytope::new(normals, offsets)
}

/// Backward recursion `S_T = Z_T ∩ Z_f`,
/// `S_l = {z ∈ Z_l | ∃ v ∈ V_l: A z + B v ∈ S_{l+1}}`, and
/// `C_T = {(x, v) | v ∈ V_0, A x + B v ∈ S_1}` (the measured state itself
/// is unconstrained).
pub fn t_step_set(
    sys: &LtiSystem,
    cons: &ChanceConstraints,
    schedule: &TighteningSchedule,
    terminal_tightened: &Polytope,
) -> Result<TStepSet> {
    let t = schedule.horizon();
    if t != sys.horizon || schedule.mu.len() != t {
        return Err(Error::DimensionMismatch("schedule length differs from the horizon".into()));
    }
    let n = sys.nx();
    let last = schedule.state_set(cons, t).intersect(terminal_tightened)?.reduce();
    if last.is_empty() {
        return Err(Error::EmptyStage(format!("S_{t}")));
    }
    let mut stages = vec![last];
    for l in (1..t).rev() {
        let lifted = lifted_stage(
            sys,
            Some((&cons.state_normals, &schedule.eta[l - 1])),
            (&cons.input_normals, &schedule.mu[l]),
            stages.last().expect("non-empty"),
        )?;
        let s = lifted.project(&(0..n).collect::<Vec<_>>())?;
        if s.is_empty() {
            return Err(Error::EmptyStage(format!("S_{l}")));
        }
        stages.push(s);
    }
    stages.reverse();
    let lifted = lifted_stage(sys, None, (&cons.input_normals, &schedule.mu[0]), &stages[0])?.reduce();
    if lifted.is_empty() {
        return Err(Error::EmptyStage("C_T".into()));
    }
    Ok(TStepSet { lifted, stages })
}

/// Feasible region `X_N ⊕ S` of a rigid-tube controller, where `X_N` holds
/// the nominal initial states meeting the stage-1 state rows that can be
/// steered through the schedule.
pub fn rigid_tube_region(
    cons: &ChanceConstraints,
    schedule: &TighteningSchedule,
    t_step: &TStepSet,
    tube: &Polytope,
) -> Result<Polytope> {
    let n = cons.state_normals.ncols();
    let nominal = t_step
        .lifted
        .project(&(0..n).collect::<Vec<_>>())?
        .intersect(&schedule.state_set(cons, 1))?
        .reduce();
    if nominal.is_empty() {
        return Err(Error::EmptyStage("nominal feasible set".into()));
    }
    Ok(nominal.minkowski_sum(tube)?.reduce())
}

/// Robust control invariant subset of `Proj_x C_T` for
/// `x⁺ = A x + B u + B_w w` with `(x, u) ∈ C_T`, by the decreasing
/// iteration `C ← {x ∈ C | ∃u: (x, u) ∈ C_T, A x + B u ∈ C ⊖ B_w W}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlInvariant {
    pub set: Polytope,
    pub projection: Polytope,
    pub iterations: usize,
}

pub fn robust_control_invariant(
    sys: &LtiSystem,
    ct: &Polytope,
    disturbance: &Polytope,
    opts: &InvariantOptions,
) -> Result<ControlInvariant> {
    let (n, m) = (sys.nx(), sys.nu());
    let keep: Vec<usize> = (0..n).collect();
    let projection = ct.project(&keep)?;
    if projection.is_empty() {
        return Err(Error::EmptyStage("Proj_x C_T".into()));
    }
    let mut current = projection.clone();
    for it in 1..=opts.rci_cap {
        let target = current.pontryagin_diff_image(disturbance, &sys.bw)?;
        if target.is_empty() {
            return Err(Error::EmptyStage(format!("robust control invariant iterate {it}")));
        }
        let (rc, rs, rt) = (ct.n_rows(), current.n_rows(), target.n_rows());
        let mut normals = DMatrix::zeros(rc + rs + rt, n + m);
        let mut offsets = DVector::zeros(rc + rs + rt);
        normals.rows_mut(0, rc).copy_from(ct.normals());
        offsets.rows_mut(0, rc).copy_from(ct.offsets());
        normals.view_mut((rc, 0), (rs, n)).copy_from(current.normals());
        offsets.rows_mut(rc, rs).copy_from(current.offsets());
        normals.view_mut((rc + rs, 0), (rt, n)).copy_from(&(target.normals() * &sys.a));
        normals.view_mut((rc + rs, n), (rt, m)).copy_from(&(target.normals() * &sys.b));
        offsets.rows_mut(rc + rs, rt).copy_from(target.offsets());
        let next = Polytope::new(normals, offsets)?.project(&keep)?;
        if next.is_empty() {
            return Err(Error::EmptyStage(format!("robust control invariant iterate {it}")));
        }
        if next.contains(&current, opts.fixed_point_tol) {
            return Ok(ControlInvariant {
                set: next,
                projection,
                iterations: it,
            });
        }
        current = next;
    }
    Err(Error::NonConvergence {
        what: "robust control invariant set",
        cap: opts.rci_cap,
    })
}

/// `C ⊖ B_w W`, the set the first predicted nominal state must reach.
pub fn first_step_set(invariant: &Polytope, bw: &DMatrix<f64>, disturbance: &Polytope) -> Result<Polytope> {
    let s = invariant.pontryagin_diff_image(disturbance, bw)?;
    if s.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(s)
}

/// Checks the control invariance of `set` at every vertex: some input keeps
/// `(x, u) ∈ C_T` and sends the nominal successor into `set ⊖ B_w W`.
/// Returns the worst LP slack (negative means a violated vertex).
pub fn control_invariance_margin(sys: &LtiSystem, ct: &Polytope, set: &Polytope, disturbance: &Polytope) -> Result<f64> {
    let (n, m) = (sys.nx(), sys.nu());
    let target = set.pontryagin_diff_image(disturbance, &sys.bw)?;
    let mut worst = f64::INFINITY;
    for x in set.vertices()? {
        // max t  s.t. ct rows at (x, u) + t ≤ offsets, target rows at A x + B u + t ≤ offsets.
        let (rc, rt) = (ct.n_rows(), target.n_rows());
        let mut a = DMatrix::zeros(rc + rt, m + 1);
        let mut b = DVector::zeros(rc + rt);
        for i in 0..rc {
            let row = ct.normals().row(i);
            for j in 0..m {
                a[(i, j)] = row[n + j];
            }
            a[(i, m)] = row.norm();
            b[i] = ct.offsets()[i] - row.columns(0, n).dot(&x.transpose());
        }
        let tb = target.normals() * &sys.b;
        let ta = target.normals() * &sys.a * &x;
        for i in 0..rt {
            for j in 0..m {
                a[(rc + i, j)] = tb[(i, j)];
            }
            a[(rc + i, m)] = target.normals().row(i).norm();
            b[rc + i] = target.offsets()[i] - ta[i];
        }
        let mut obj = DVector::zeros(m + 1);
        obj[m] = 1.0;
        let slack = match crate::polytope::lp::maximize(&a, &b, &obj) {
            crate::polytope::lp::LpOutcome::Optimal { value, .. } => value,
            crate::polytope::lp::LpOutcome::Infeasible { .. } => f64::NEG_INFINITY,
            crate::polytope::lp::LpOutcome::Unbounded => f64::INFINITY,
        };
        worst = worst.min(slack);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::lqr_synthesize;
    use crate::tightening::{Certificates, Variant};
    use nalgebra::{dmatrix, dvector};

    fn scalar_gains(acl: f64) -> ControllerGains {
        ControllerGains {
            gain: dmatrix![0.0],
            terminal_weight: dmatrix![1.0],
            closed_loop: dmatrix![acl],
            spectral_radius: acl.abs(),
        }
    }

    #[test]
    fn scalar_terminal_interval() {
        // x⁺ = 0.5 x + w, |w| ≤ 1, constraint |x| ≤ 4: maximal RPI set
        // {|x| ≤ 4 : 0.5|x| + 1 ≤ 4} = [−4, 4] ∩ [−6, 6] = [−4, 4].
        let g = scalar_gains(0.5);
        let w = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let cand = Polytope::from_box(&[-4.0], &[4.0]).unwrap();
        let ts = terminal_set(&g, &dmatrix![1.0], &w, &cand, &InvariantOptions::default()).unwrap();
        assert!(ts.set.equal(&cand, 1e-9));
        // x⁺ = −0.5 x + w on [−3, 2.2]: the upper bound cuts the lower one
        // to −2.4, after which the interval is invariant.
        let flip = scalar_gains(-0.5);
        let cand = Polytope::from_box(&[-3.0], &[2.2]).unwrap();
        let ts = terminal_set(&flip, &dmatrix![1.0], &w, &cand, &InvariantOptions::default()).unwrap();
        assert!(ts.set.equal(&Polytope::from_box(&[-2.4], &[2.2]).unwrap(), 1e-9));
        assert_eq!(ts.iterations, 2);
        // Constraint too small for the disturbance.
        let tiny = Polytope::from_box(&[-0.5], &[0.5]).unwrap();
        assert!(matches!(
            terminal_set(&g, &dmatrix![1.0], &w, &tiny, &InvariantOptions::default()),
            Err(Error::EmptyTerminalSet)
        ));
    }

    #[test]
    fn already_invariant_candidate() {
        let g = scalar_gains(0.5);
        let zero = Polytope::point(&[0.0]);
        let cand = Polytope::from_box(&[-1.0], &[2.0]).unwrap();
        let ts = terminal_set(&g, &dmatrix![1.0], &zero, &cand, &InvariantOptions::default()).unwrap();
        assert!(ts.set.equal(&cand, 1e-12));
        assert_eq!(ts.iterations, 1);
    }

    #[test]
    fn mrpi_scalar_geometric_series() {
        let g = scalar_gains(0.5);
        let w = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let opts = InvariantOptions::default();
        let b = mrpi_outer(&g, &dmatrix![1.0], &w, &opts).unwrap();
        let exact = Polytope::from_box(&[-2.0], &[2.0]).unwrap();
        assert!(b.set.contains(&exact, 1e-12));
        assert!(exact.scale(1.0 + opts.mrpi_accuracy).contains(&b.set, 1e-12));
        assert!(is_robust_invariant(&b.set, &g.closed_loop, &dmatrix![1.0], &w, 1e-9).unwrap());
        let zero = scalar_gains(0.0);
        let b0 = mrpi_outer(&zero, &dmatrix![1.0], &w, &opts).unwrap();
        assert!(b0.set.equal(&w, 1e-12));
    }

    #[test]
    fn one_step_lifted_set() {
        // T = 1 expands to {(x, v) | G v ≤ μ_0, H(Ax + Bv) ≤ η_1, H_f(Ax + Bv) ≤ η_f}.
        let sys = LtiSystem::new(dmatrix![1.0, 0.1; 0.0, 1.0], dmatrix![0.0; 1.0], DMatrix::identity(2, 2), DMatrix::identity(2, 2), dmatrix![1.0], 1).unwrap();
        let cons = ChanceConstraints {
            state_normals: dmatrix![1.0, 0.0; 0.0, 1.0],
            state_offsets: dvector![1.0, 1.0],
            eps: dvector![0.1, 0.1],
            input_normals: dmatrix![1.0; -1.0],
            input_offsets: dvector![0.5, 0.5],
            eps_u: 0.1,
            terminal_eps: 0.1,
        };
        let schedule = TighteningSchedule {
            eta: vec![dvector![0.8, 0.9]],
            mu: vec![dvector![0.5, 0.5]],
            eta_f: dvector![0.7, 0.7],
            variant: Variant::Plain,
            certificate: Certificates::default(),
            seed: 0,
        };
        let zf = Polytope::new(dmatrix![1.0, 1.0; -1.0, -1.0], dvector![0.7, 0.7]).unwrap();
        let ct = t_step_set(&sys, &cons, &schedule, &zf).unwrap();
        let mut rows = DMatrix::zeros(6, 3);
        let ab = |r: [f64; 2]| {
            let h = DMatrix::from_row_slice(1, 2, &r);
            let a = &h * &sys.a;
            let b = &h * &sys.b;
            [a[(0, 0)], a[(0, 1)], b[(0, 0)]]
        };
        let spec: [([f64; 2], f64); 4] = [([1.0, 0.0], 0.8), ([0.0, 1.0], 0.9), ([1.0, 1.0], 0.7), ([-1.0, -1.0], 0.7)];
        let mut offs = DVector::zeros(6);
        for (i, (r, o)) in spec.iter().enumerate() {
            let v = ab(*r);
            for j in 0..3 {
                rows[(i, j)] = v[j];
            }
            offs[i] = *o;
        }
        rows[(4, 2)] = 1.0;
        offs[4] = 0.5;
        rows[(5, 2)] = -1.0;
        offs[5] = 0.5;
        let expect = Polytope::new(rows, offs).unwrap();
        assert!(ct.lifted.equal(&expect, 1e-9));
    }

    #[test]
    fn unconstrained_lifted_set_is_everything() {
        let sys = LtiSystem::new(dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], 2).unwrap();
        let cons = ChanceConstraints {
            state_normals: DMatrix::zeros(0, 1),
            state_offsets: DVector::zeros(0),
            eps: DVector::zeros(0),
            input_normals: DMatrix::zeros(0, 1),
            input_offsets: DVector::zeros(0),
            eps_u: 0.1,
            terminal_eps: 0.1,
        };
        let schedule = TighteningSchedule {
            eta: vec![DVector::zeros(0); 2],
            mu: vec![DVector::zeros(0); 2],
            eta_f: DVector::zeros(0),
            variant: Variant::Plain,
            certificate: Certificates::default(),
            seed: 0,
        };
        let ct = t_step_set(&sys, &cons, &schedule, &Polytope::universe(1)).unwrap();
        assert_eq!(ct.lifted.n_rows(), 0);
    }

    #[test]
    fn rci_of_invariant_set_is_immediate() {
        // Double integrator with a generous input: C_T already control invariant.
        let sys = LtiSystem::new(dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], 1).unwrap();
        let ct = Polytope::from_box(&[-1.0, -2.0], &[1.0, 2.0]).unwrap();
        let w = Polytope::from_box(&[-0.1], &[0.1]).unwrap();
        let rci = robust_control_invariant(&sys, &ct, &w, &InvariantOptions::default()).unwrap();
        assert_eq!(rci.iterations, 1);
        assert!(rci.set.equal(&Polytope::from_box(&[-1.0], &[1.0]).unwrap(), 1e-9));
        assert!(control_invariance_margin(&sys, &ct, &rci.set, &w).unwrap() >= -1e-9);
        let fs = first_step_set(&rci.set, &sys.bw, &w).unwrap();
        assert!(fs.equal(&Polytope::from_box(&[-0.9], &[0.9]).unwrap(), 1e-9));
    }

    #[test]
    fn rci_zero_disturbance_control_invariance() {
        // x⁺ = 2x + u with |u| ≤ 1 and |x| ≤ 3: control invariant part is |x| ≤ 1.
        let sys = LtiSystem::new(dmatrix![2.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], 1).unwrap();
        let ct = Polytope::from_box(&[-3.0, -1.0], &[3.0, 1.0]).unwrap();
        let zero = Polytope::point(&[0.0]);
        let rci = robust_control_invariant(&sys, &ct, &zero, &InvariantOptions::default()).unwrap();
        assert!(rci.set.equal(&Polytope::from_box(&[-1.0], &[1.0]).unwrap(), 1e-8));
    }

    #[test]
    fn example_terminal_set_is_invariant() {
        let sys = LtiSystem::new(
            dmatrix![1.0, 0.0075; -0.143, 0.996],
            dmatrix![4.798; 0.115],
            DMatrix::identity(2, 2),
            dmatrix![1.0, 0.0; 0.0, 10.0],
            dmatrix![1.0],
            8,
        )
        .unwrap();
        let gains = lqr_synthesize(&sys).unwrap();
        let w = crate::disturbance::circumscribed_polygon(0.02f64.sqrt(), 8).unwrap();
        let cons = ChanceConstraints {
            state_normals: dmatrix![1.0, 0.0],
            state_offsets: dvector![2.0],
            eps: dvector![0.2],
            input_normals: dmatrix![1.0; -1.0],
            input_offsets: dvector![0.2, 0.2],
            eps_u: 0.05,
            terminal_eps: 0.05,
        };
        let cand = terminal_candidate(&gains, &cons, &dvector![1.9]).unwrap();
        let ts = terminal_set(&gains, &sys.bw, &w, &cand, &InvariantOptions::default()).unwrap();
        assert!(!ts.set.is_empty());
        assert!(cand.contains(&ts.set, 1e-9));
        assert!(is_robust_invariant(&ts.set, &gains.closed_loop, &sys.bw, &w, 1e-8).unwrap());
        let mrpi = mrpi_outer(&gains, &sys.bw, &w, &InvariantOptions::default()).unwrap();
        assert!(is_robust_invariant(&mrpi.set, &gains.closed_loop, &sys.bw, &w, 1e-8).unwrap());
        assert!(lambda_margin(&ts.set, &mrpi.set).unwrap() > 0.0);
    }
}
