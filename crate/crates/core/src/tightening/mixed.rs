//! Schedules under which the shifted previous plan remains feasible for
//! every disturbance in a confidence region `W_f`.
//!
//! With `s_j(m) = support(W_f, (row_j A_cl^m B_w)ᵀ)` and plain offsets
//! `o_k` at error horizon `k`, the mixed offset at stage `l` is
//!
//! ```text
//! õ_l = min_{i = 0 … i_max} ( o_{l−i} − Σ_{κ=1}^{i} s(l − κ) )
//! ```
//!
//! where `i_max = l − 1` for state rows (the first constrained state is
//! `z_1`), `i_max = l` for input rows (`o_0 = g`) and `i_max = T` for the
//! terminal rows (`o_0 = h_f`, `l = T`).

use nalgebra::{DMatrix, DVector};

use super::{Certificates, StageTightening, Tightener, TighteningSchedule, Variant};
use crate::disturbance::ConfidenceRegion;
use crate::error::Result;
use crate::polytope::Polytope;

/// `s[m]_j = support(set, (rows_j A_cl^m B_w)ᵀ)` for `m = 0 … horizon`.
pub fn step_supports(t: &Tightener, rows: &DMatrix<f64>, set: &Polytope, horizon: usize) -> Result<Vec<DVector<f64>>> {
    (0..=horizon)
        .map(|m| {
            let mut s = DVector::zeros(rows.nrows());
            for j in 0..rows.nrows() {
                s[j] = set.support(&(rows.row(j) * t.propagation().map(m)).transpose())?;
            }
            Ok(s)
        })
        .collect()
}

/// Every branch `o_{l−i} − Σ_{κ=1}^{i} s(l−κ)` for `i = 0 … i_max`.
pub fn branches<'o>(
    offsets_at: impl Fn(usize) -> &'o DVector<f64>,
    supports: &[DVector<f64>],
    l: usize,
    i_max: usize,
) -> Vec<DVector<f64>> {
    let mut acc = DVector::zeros(supports[0].len());
    let mut out = Vec::with_capacity(i_max + 1);
    for i in 0..=i_max {
        if i > 0 {
            acc += &supports[l - i];
        }
        out.push(offsets_at(l - i) - &acc);
    }
    out
}

fn componentwise_min(vs: &[DVector<f64>]) -> DVector<f64> {
    let mut m = vs[0].clone();
    for v in &vs[1..] {
        m.zip_apply(v, |a, b| *a = a.min(b));
    }
    m
}

/// Mixed schedule from the plain stage offsets, the terminal set and the
/// confidence region `W_f`.
pub fn mixed_schedule(
    t: &Tightener,
    stages: &StageTightening,
    terminal: &Polytope,
    region: &ConfidenceRegion,
    eps_f: f64,
) -> Result<TighteningSchedule> {
    let horizon = t.sys.horizon;
    let cons = t.constraints;
    let wf = &region.region;

    let s_state = step_supports(t, &cons.state_normals, wf, horizon)?;
    let eta: Vec<DVector<f64>> = (1..=horizon)
        .map(|l| componentwise_min(&branches(|k| &stages.eta[k - 1], &s_state, l, l - 1)))
        .collect();

    let gk = t.input_error_rows();
    let s_input = step_supports(t, &gk, wf, horizon)?;
    let mu: Vec<DVector<f64>> = (0..horizon)
        .map(|l| componentwise_min(&branches(|k| &stages.mu[k], &s_input, l, l)))
        .collect();

    let horizons: Vec<usize> = (1..=horizon).collect();
    let (profile, terminal_certs) = t.terminal_offsets(terminal, &horizons)?;
    let hf = terminal.offsets().clone();
    let s_term = step_supports(t, terminal.normals(), wf, horizon)?;
    let eta_f = componentwise_min(&branches(
        |k| if k == 0 { &hf } else { &profile[k - 1] },
        &s_term,
        horizon,
        horizon,
    ));

    Ok(TighteningSchedule {
        eta,
        mu,
        eta_f,
        variant: Variant::Mixed {
            eps_f,
            scale: region.scale,
        },
        certificate: Certificates {
            method: Some(t.method),
            state: stages.state_certs.clone(),
            input: stages.input_certs.clone(),
            terminal: terminal_certs,
        },
        seed: t.sampling.seed,
    })
}
