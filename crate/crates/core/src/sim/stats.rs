use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClosedLoopTrace, Simulator, Z95};
use crate::controller::Controller;
use crate::disturbance::{stream_rng, DisturbanceModel};
use crate::error::{Error, Result};
use crate::polytope::Polytope;
use crate::qp::QpStatus;

/// Wilson score interval for `successes` out of `n` at normal quantile `z`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Empirical frequency with its binomial standard error and 95 % Wilson
/// interval.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Frequency {
    pub count: usize,
    pub total: usize,
    pub rate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Frequency {
    pub fn new(count: usize, total: usize) -> Self {
        let rate = if total == 0 { 0.0 } else { count as f64 / total as f64 };
        let se = if total == 0 { 0.0 } else { (rate * (1.0 - rate) / total as f64).sqrt() };
        let (ci_lo, ci_hi) = wilson_interval(count, total, Z95);
        Self {
            count,
            total,
            rate,
            se,
            ci_lo,
            ci_hi,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViolationReport {
    /// Steps `k` covered, in order.
    pub steps: Vec<usize>,
    /// `per_step[row][i]`: violations of `row` at `steps[i]`.
    pub per_step: Vec<Vec<Frequency>>,
    /// Violations of any row.
    pub any_row: Vec<Frequency>,
    /// Per-row mean over the window of the per-trace violation fraction.
    pub window_average: Vec<f64>,
    pub window_se: Vec<f64>,
    pub any_row_window_average: f64,
    pub any_row_window_se: f64,
    pub traces: usize,
}

/// Marginal violation frequencies of `H x ≤ h` over the steps in `window`.
pub fn violation_stats(traces: &[ClosedLoopTrace], constraints: &Polytope, window: RangeInclusive<usize>) -> Result<ViolationReport> {
    if traces.is_empty() {
        return Err(Error::BadParams("violation statistics need at least one trace".into()));
    }
    let rows = constraints.n_rows();
    let steps: Vec<usize> = window.collect();
    // flags[trace][i] = per-row violation at steps[i], None when missing.
    let flags: Vec<Vec<Option<Vec<bool>>>> = traces
        .iter()
        .map(|t| {
            steps
                .iter()
                .map(|&k| {
                    t.state(k).map(|x| {
                        let hx = constraints.normals() * &x;
                        (0..rows).map(|j| hx[j] > constraints.offsets()[j]).collect()
                    })
                })
                .collect()
        })
        .collect();
    let freq = |pick: &dyn Fn(&[bool]) -> bool, i: usize| {
        let mut count = 0;
        let mut total = 0;
        for f in &flags {
            if let Some(v) = &f[i] {
                total += 1;
                count += usize::from(pick(v));
            }
        }
        Frequency::new(count, total)
    };
    let per_step = (0..rows)
        .map(|j| (0..steps.len()).map(|i| freq(&|v: &[bool]| v[j], i)).collect())
        .collect();
    let any_row = (0..steps.len()).map(|i| freq(&|v: &[bool]| v.iter().any(|&b| b), i)).collect();
    let window_mean = |pick: &dyn Fn(&[bool]) -> bool| {
        let per_trace: Vec<f64> = flags
            .iter()
            .filter_map(|f| {
                let seen: Vec<bool> = f.iter().flatten().map(|v| pick(v)).collect();
                (!seen.is_empty()).then(|| seen.iter().filter(|&&b| b).count() as f64 / seen.len() as f64)
            })
            .collect();
        mean_se(&per_trace)
    };
    let (mut window_average, mut window_se) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
    for j in 0..rows {
        let (m, s) = window_mean(&|v: &[bool]| v[j]);
        window_average.push(m);
        window_se.push(s);
    }
    let (any_row_window_average, any_row_window_se) = window_mean(&|v: &[bool]| v.iter().any(|&b| b));
    Ok(ViolationReport {
        steps,
        per_step,
        any_row,
        window_average,
        window_se,
        any_row_window_average,
        any_row_window_se,
        traces: traces.len(),
    })
}

/// Sample mean and its standard error.
pub(crate) fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// One-step-ahead violation frequencies `P{H_j x_{k+1} > h_j | x_k}` pooled
/// over recorded states `x_k`, `k < horizon`, of the first `max_traces`
/// traces, with `draws` fresh disturbances per state.
pub fn conditional_violation(
    sim: &Simulator,
    traces: &[ClosedLoopTrace],
    constraints: &Polytope,
    horizon: usize,
    max_traces: usize,
    draws: usize,
    seed: u64,
) -> Vec<Frequency> {
    let sys = sim.controller().system();
    let rows = constraints.n_rows();
    let counts: Vec<(Vec<usize>, usize)> = traces
        .par_iter()
        .take(max_traces)
        .enumerate()
        .map(|(i, t)| {
            let mut rng = stream_rng(seed, i as u64);
            let mut hits = vec![0usize; rows];
            let mut total = 0usize;
            for s in t.steps.iter().take(horizon).filter(|s| !s.u.is_empty()) {
                let x = DVector::from_column_slice(&s.x);
                let u = DVector::from_column_slice(&s.u);
                let nominal = &sys.a * &x + &sys.b * &u;
                for _ in 0..draws {
                    let next = &nominal + &sys.bw * sim.model().draw(&mut rng);
                    let hx = constraints.normals() * next;
                    for (j, hit) in hits.iter_mut().enumerate() {
                        *hit += usize::from(hx[j] > constraints.offsets()[j]);
                    }
                    total += 1;
                }
            }
            (hits, total)
        })
        .collect();
    let total: usize = counts.iter().map(|c| c.1).sum();
    (0..rows)
        .map(|j| Frequency::new(counts.iter().map(|c| c.0[j]).sum(), total))
        .collect()
}

/// Mean with standard error and 95 % interval.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub samples: usize,
}

impl CostEstimate {
    fn from_samples(values: &[f64]) -> Self {
        let (mean, se) = mean_se(values);
        Self {
            mean,
            se,
            ci_lo: mean - Z95 * se,
            ci_hi: mean + Z95 * se,
            samples: values.len(),
        }
    }
}

/// Time-and-ensemble average of `‖x_k‖²_Q` over `k ≥ burn_in`. The
/// interval comes from the spread of the per-trace time averages.
pub fn average_cost(traces: &[ClosedLoopTrace], q: &DMatrix<f64>, burn_in: usize) -> Result<CostEstimate> {
    let per_trace: Vec<f64> = traces
        .iter()
        .filter_map(|t| {
            let states = t.states();
            let tail: Vec<f64> = states.iter().skip(burn_in).map(|x| x.dot(&(q * x))).collect();
            (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
        })
        .collect();
    if per_trace.is_empty() {
        return Err(Error::BadParams(format!("no trace is longer than the burn-in of {burn_in} steps")));
    }
    Ok(CostEstimate::from_samples(&per_trace))
}

/// Monte Carlo estimate of `E‖B_w w‖²_P` from `draws` disturbances.
pub fn disturbance_energy(model: &DisturbanceModel, weight: &DMatrix<f64>, bw: &DMatrix<f64>, draws: usize, seed: u64) -> CostEstimate {
    let chunks = 64usize;
    let per_chunk = draws.div_ceil(chunks);
    let values: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let count = per_chunk.min(draws.saturating_sub(c * per_chunk));
            (0..count)
                .map(|_| {
                    let e = bw * model.draw(&mut rng);
                    e.dot(&(weight * &e))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    CostEstimate::from_samples(&values)
}

/// Empirical constant of the average-cost bound: largest observed slope of
/// the optimal value between sampled feasible states, times
/// `max_{w ∈ W} ‖B_w w‖`. This is an estimate, not a certified bound.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LipschitzEstimate {
    pub slope: f64,
    pub disturbance_bound: f64,
    pub c_hat: f64,
    pub pairs: usize,
}

/// Slopes over `pairs` state pairs in `region`: half are independent
/// uniform pairs, half are local perturbations of 1 % of the bounding box
/// diagonal.
pub fn lipschitz_estimate(
    controller: &Controller,
    region: &Polytope,
    support: &Polytope,
    pairs: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    let value = |x: &DVector<f64>| -> Option<f64> {
        let s = controller.solve(x).ok()?;
        (s.status == QpStatus::Optimal).then_some(s.value)
    };
    let (lo, hi) = region.bounding_box()?;
    let radius = 0.01 * (&hi - &lo).norm();
    let xs = Simulator::sample_states(region, pairs, seed, 0)?;
    let ys = Simulator::sample_states(region, pairs, seed, 1)?;
    let mut rng = stream_rng(seed, 2);
    let mut slope: f64 = 0.0;
    let mut used = 0usize;
    for (i, (x, y)) in xs.iter().zip(&ys).enumerate() {
        let y = if i % 2 == 0 {
            y.clone()
        } else {
            let dir = DVector::from_fn(x.len(), |_, _| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng));
            x + dir.normalize() * radius
        };
        let dist = (x - &y).norm();
        if dist == 0.0 || !region.contains_point(&y, 0.0) {
            continue;
        }
        if let (Some(vx), Some(vy)) = (value(x), value(&y)) {
            slope = slope.max((vx - vy).abs() / dist);
            used += 1;
        }
    }
    let bw = &controller.system().bw;
    let mut disturbance_bound: f64 = 0.0;
    for v in support.vertices()? {
        disturbance_bound = disturbance_bound.max((bw * v).norm());
    }
    Ok(LipschitzEstimate {
        slope,
        disturbance_bound,
        c_hat: slope * disturbance_bound,
        pairs: used,
    })
}

/// Monte Carlo check of the expected one-step value decrease
/// `E[V(x⁺)] − V(x) + ‖x‖²_Q − E‖B_w w‖²_P − ε_f Ĉ ≤ 0`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ValueCheck {
    pub mean: f64,
    pub se: f64,
    /// `mean ≤ 3 se`.
    pub holds: bool,
    pub states: usize,
    pub draws: usize,
    /// Successor states where the online problem was infeasible.
    pub infeasible: usize,
}

pub fn one_step_value_check(
    sim: &Simulator,
    states: &[DVector<f64>],
    draws: usize,
    offset: f64,
    seed: u64,
) -> Result<ValueCheck> {
    let sys = sim.controller().system();
    let results: Vec<Result<(f64, usize)>> = states
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut ctrl = sim.controller().clone();
            let (u, sol) = ctrl.mpc_step(x)?;
            let mut rng = stream_rng(seed, i as u64);
            let mut acc = 0.0;
            let mut infeasible = 0usize;
            let mut used = 0usize;
            for _ in 0..draws {
                let next = sys.step(x, &u, &sim.model().draw(&mut rng));
                match ctrl.solve(&next) {
                    Ok(s) if s.status == QpStatus::Optimal => {
                        acc += s.value;
                        used += 1;
                    }
                    Ok(_) => infeasible += 1,
                    Err(e) => return Err(e),
                }
            }
            let expected = if used > 0 { acc / used as f64 } else { f64::INFINITY };
            Ok((expected - sol.value + x.dot(&(&sys.q * x)) - offset, infeasible))
        })
        .collect();
    let mut values = Vec::with_capacity(states.len());
    let mut infeasible = 0;
    for r in results {
        let (v, inf) = r?;
        values.push(v);
        infeasible += inf;
    }
    let (mean, se) = mean_se(&values);
    Ok(ValueCheck {
        mean,
        se,
        holds: mean <= 3.0 * se,
        states: states.len(),
        draws,
        infeasible,
    })
}
