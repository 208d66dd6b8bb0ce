use serde::{Deserialize, Serialize};

use super::ClosedLoopTrace;

/// One-sided 95 % standard normal quantile.
const Z95_ONE_SIDED: f64 = 1.644_853_626_951_472;

/// Tail statistic at one cut-off `k'`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TailPoint {
    pub k: usize,
    /// Fraction of traces with `sup_{k ≥ k'} dist(x_k, X_∞) < eps2`.
    pub fraction_below: f64,
    pub mean_sup_dist: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// First step in the terminal set, per trace.
    pub first_entry: Vec<Option<usize>>,
    pub entered_fraction: f64,
    /// Traces that were in the terminal set at some step and outside later.
    pub left_terminal: usize,
    pub eps2: f64,
    pub tail: Vec<TailPoint>,
    /// One-sided two-proportion test at 95 % that the fraction at the last
    /// cut-off exceeds the one at the first (or both already equal 1).
    pub trend_increasing: bool,
}

/// Terminal-set entry times and the tail distance curve over `cutoffs`.
pub fn convergence_diagnostics(traces: &[ClosedLoopTrace], eps2: f64, cutoffs: &[usize]) -> ConvergenceReport {
    let first_entry: Vec<Option<usize>> = traces.iter().map(|t| t.steps.iter().find(|s| s.in_terminal).map(|s| s.k)).collect();
    let left_terminal = traces
        .iter()
        .zip(&first_entry)
        .filter(|(t, e)| e.is_some_and(|k0| t.steps[k0..].iter().any(|s| !s.in_terminal)))
        .count();
    let n = traces.len().max(1) as f64;
    let tail: Vec<TailPoint> = cutoffs
        .iter()
        .map(|&k| {
            let sups: Vec<f64> = traces
                .iter()
                .filter(|t| t.steps.len() > k)
                .map(|t| t.steps[k..].iter().map(|s| s.dist_mrpi).fold(0.0, f64::max))
                .collect();
            let m = sups.len().max(1) as f64;
            TailPoint {
                k,
                fraction_below: sups.iter().filter(|&&d| d < eps2).count() as f64 / m,
                mean_sup_dist: sups.iter().sum::<f64>() / m,
            }
        })
        .collect();
    let trend_increasing = match (tail.first(), tail.last()) {
        (Some(a), Some(b)) if a.fraction_below >= 1.0 && b.fraction_below >= 1.0 => true,
        (Some(a), Some(b)) => {
            let pooled = 0.5 * (a.fraction_below + b.fraction_below);
            let se = (pooled * (1.0 - pooled) * 2.0 / n).sqrt();
            se > 0.0 && (b.fraction_below - a.fraction_below) / se > Z95_ONE_SIDED
        }
        _ => false,
    };
    ConvergenceReport {
        entered_fraction: first_entry.iter().filter(|e| e.is_some()).count() as f64 / n,
        first_entry,
        left_terminal,
        eps2,
        tail,
        trend_increasing,
    }
}
