//! Sample-and-discard solution of the one-dimensional chance-constrained
//! programs: sample-size certificates and order-statistic quantiles.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disturbance::DisturbanceModel;
use crate::error::{Error, Result};
use crate::lti::ErrorPropagation;

/// Upper end of the sample-size search.
pub const SAMPLE_CAP: u64 = 100_000_000;

/// Sample count `n_samples` and discard count `discard` such that, with
/// confidence `1 − beta`, the sampled program solves the chance-constrained
/// one for some level in `[eps_l, eps_u]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledQuantileCertificate {
    pub n_samples: usize,
    pub discard: usize,
    pub beta: f64,
    pub eps_l: f64,
    pub eps_u: f64,
}

impl SampledQuantileCertificate {
    /// Checks the two sample-and-discard bounds and `eps_u · N > r`.
    pub fn is_valid(&self) -> bool {
        let n = self.n_samples as f64;
        let r = self.discard as f64;
        r <= discard_upper(self.eps_u, self.beta, n) && r >= discard_lower(self.eps_l, self.beta, n) && self.eps_u * n > r
    }
}

fn discard_upper(eps_u: f64, beta: f64, n: f64) -> f64 {
    eps_u * n - (2.0 * eps_u * n * (1.0 / beta).ln()).sqrt()
}

fn discard_lower(eps_l: f64, beta: f64, n: f64) -> f64 {
    eps_l * n - 1.0 + (3.0 * eps_l * n * (2.0 / beta).ln()).sqrt()
}

/// Smallest sample count admitting an integer discard count inside both
/// bounds, searched upward from 1. Among admissible discard counts the one
/// closest to the bracket midpoint times `N` is returned.
pub fn campi_sample_size(eps_l: f64, eps_u: f64, beta: f64) -> Result<SampledQuantileCertificate> {
    if !(0.0 < eps_l && eps_l < eps_u && eps_u < 1.0) || !(0.0 < beta && beta < 1.0) {
        return Err(Error::BadParams(format!(
            "need 0 < eps_l < eps_u < 1 and beta in (0, 1), got [{eps_l}, {eps_u}], {beta}"
        )));
    }
    let mid = 0.5 * (eps_l + eps_u);
    for n in 1..=SAMPLE_CAP {
        let nf = n as f64;
        let hi = discard_upper(eps_u, beta, nf).floor();
        let lo = discard_lower(eps_l, beta, nf).ceil().max(0.0);
        if hi < lo {
            continue;
        }
        let r = (mid * nf).round().clamp(lo, hi);
        if eps_u * nf > r {
            return Ok(SampledQuantileCertificate {
                n_samples: n as usize,
                discard: r as usize,
                beta,
                eps_l,
                eps_u,
            });
        }
    }
    Err(Error::NoFeasiblePair {
        eps_l,
        eps_u,
        beta,
        cap: SAMPLE_CAP,
    })
}

/// Certificate for the bracket `[(1 − rel)·eps, (1 + rel)·eps]`.
pub fn bracket_certificate(eps: f64, rel: f64, beta: f64) -> Result<SampledQuantileCertificate> {
    campi_sample_size((1.0 - rel) * eps, (1.0 + rel) * eps, beta)
}

/// `(N − r)`-th smallest sample (1-based), i.e. the largest value left after
/// discarding the `r` largest. Reorders `samples`.
pub fn order_statistic(samples: &mut [f64], discard: usize) -> f64 {
    assert!(discard < samples.len(), "discard count must be below the sample count");
    let k = samples.len() - discard - 1;
    let (_, kth, _) = samples.select_nth_unstable_by(k, f64::total_cmp);
    *kth
}

/// `h_j − q` with `q` the `(1 − r/N)` sample quantile.
pub fn quantile_tighten(samples: &mut [f64], offset: f64, discard: usize) -> f64 {
    offset - order_statistic(samples, discard)
}

/// One batch job: rows whose values `row · e_l` share an error horizon and
/// a certificate.
pub(crate) struct RowJob {
    pub horizon: usize,
    pub rows: Vec<usize>,
    pub cert: SampledQuantileCertificate,
    pub stream: u64,
}

/// Sample quantiles `q_j` of `rows_j · e_l` for every job, in job order.
/// Each job draws its own stream, so results do not depend on scheduling.
pub(crate) fn sampled_quantiles(
    jobs: &[RowJob],
    rows: &DMatrix<f64>,
    prop: &ErrorPropagation,
    model: &DisturbanceModel,
) -> Vec<Vec<f64>> {
    jobs.par_iter()
        .map(|job| {
            let l = job.horizon;
            if l == 0 {
                return vec![0.0; job.rows.len()];
            }
            // coeffs[r][i] = rows_r A_cl^{l-1-i} B_w, so that rows_r e_l = Σ_i coeffs[r][i] w_i.
            let coeffs: Vec<Vec<DVector<f64>>> = job
                .rows
                .iter()
                .map(|&r| {
                    let row = rows.row(r);
                    (0..l).map(|i| (row * prop.map(l - 1 - i)).transpose()).collect()
                })
                .collect();
            let n = job.cert.n_samples;
            let mut values = vec![vec![0.0; n]; job.rows.len()];
            let mut rng = model.rng(job.stream);
            let mut acc = vec![0.0; job.rows.len()];
            for s in 0..n {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for i in 0..l {
                    let w = model.draw(&mut rng);
                    for (a, c) in acc.iter_mut().zip(&coeffs) {
                        *a += c[i].dot(&w);
                    }
                }
                for (v, a) in values.iter_mut().zip(&acc) {
                    v[s] = *a;
                }
            }
            values
                .iter_mut()
                .map(|v| order_statistic(v, job.cert.discard))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_bracket_certificate() {
        let cert = bracket_certificate(0.2, 0.05, 1e-4).unwrap();
        assert!(cert.is_valid());
        let ratio = cert.discard as f64 / cert.n_samples as f64;
        assert!((0.19..=0.21).contains(&ratio), "{cert:?}");
        // Minimality: no smaller N admits a valid discard count.
        let prev = cert.n_samples as f64 - 1.0;
        let hi = discard_upper(cert.eps_u, cert.beta, prev).floor();
        let lo = discard_lower(cert.eps_l, cert.beta, prev).ceil();
        assert!(hi < lo || cert.eps_u * prev <= lo);
    }

    #[test]
    fn wider_bracket_needs_fewer_samples() {
        let mut last = usize::MAX;
        for rel in [0.05, 0.1, 0.2, 0.4] {
            let c = bracket_certificate(0.1, rel, 1e-3).unwrap();
            assert!(c.n_samples <= last);
            last = c.n_samples;
        }
    }

    #[test]
    fn bad_brackets() {
        assert!(campi_sample_size(0.2, 0.1, 1e-3).is_err());
        assert!(campi_sample_size(0.1, 0.2, 0.0).is_err());
    }

    #[test]
    fn order_statistic_hand_check() {
        let mut s: Vec<f64> = (1..=10).map(f64::from).collect();
        s.reverse();
        assert_eq!(order_statistic(&mut s, 2), 8.0);
        // Discarding the r largest and taking the max of the rest.
        let mut t: Vec<f64> = (1..=10).map(f64::from).collect();
        t.sort_by(|a, b| b.total_cmp(a));
        let oracle = t[2..].iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(order_statistic(&mut s, 2), oracle);
        assert_eq!(quantile_tighten(&mut s, 5.0, 2), -3.0);
        let mut z = vec![0.0; 7];
        assert_eq!(quantile_tighten(&mut z, 1.5, 3), 1.5);
        let mut u = vec![3.0, 1.0, 2.0];
        assert_eq!(quantile_tighten(&mut u, 0.0, 0), -3.0);
    }
}
