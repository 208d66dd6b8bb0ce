//! Deterministic tightening from the density of `H_j e_l`, obtained by
//! discrete convolution of the scaled one-dimensional marginals.
//!
//! Each term `c · W_s` is discretized on a common lattice of spacing `dx`:
//! the mass of cell `[(k − ½)dx, (k + ½)dx]` is a CDF difference. Sums of
//! lattice variables stay on the lattice, so the density of the whole sum
//! is a chain of direct convolutions.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::disturbance::Marginal;
use crate::error::{Error, Result};

pub const DEFAULT_GRID: usize = 1 << 14;
const MASS_TOL: f64 = 1e-6;
/// Gaussian tails beyond this many standard deviations are dropped.
const GAUSS_SPAN: f64 = 8.5;

impl Marginal {
    fn half_width(&self) -> (f64, f64) {
        match *self {
            Marginal::Uniform { lo, hi } => (lo, hi),
            Marginal::Gaussian { sd } => (-GAUSS_SPAN * sd, GAUSS_SPAN * sd),
            Marginal::TruncatedGaussian { sd, bound } => {
                let b = bound.min(GAUSS_SPAN * sd);
                (-b, b)
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Uniform { lo, hi } => {
                if hi <= lo {
                    if x >= lo {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
                }
            }
            Marginal::Gaussian { sd } => std_normal().cdf(x / sd),
            Marginal::TruncatedGaussian { sd, bound } => {
                let n = std_normal();
                let lo = n.cdf(-bound / sd);
                let hi = n.cdf(bound / sd);
                ((n.cdf(x.clamp(-bound, bound) / sd) - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

/// Lattice distribution: `mass[k]` sits at `(offset + k)·dx`.
#[derive(Clone, Debug)]
struct Lattice {
    offset: i64,
    mass: Vec<f64>,
}

/// Cell masses of `coef · W` on the lattice of spacing `dx`.
fn discretize(marginal: &Marginal, coef: f64, dx: f64) -> Lattice {
    let (lo, hi) = marginal.half_width();
    let (a, b) = if coef >= 0.0 { (coef * lo, coef * hi) } else { (coef * hi, coef * lo) };
    let k0 = (a / dx - 0.5).floor() as i64;
    let k1 = (b / dx + 0.5).ceil() as i64;
    let cdf = |x: f64| {
        if coef > 0.0 {
            marginal.cdf(x / coef)
        } else {
            1.0 - marginal.cdf(x / coef)
        }
    };
    let mut mass = Vec::with_capacity((k1 - k0 + 1) as usize);
    let mut prev = cdf((k0 as f64 - 0.5) * dx);
    for k in k0..=k1 {
        let next = cdf((k as f64 + 0.5) * dx);
        mass.push((next - prev).max(0.0));
        prev = next;
    }
    Lattice { offset: k0, mass }
}

fn convolve(a: &Lattice, b: &Lattice) -> Lattice {
    let mut out = vec![0.0; a.mass.len() + b.mass.len() - 1];
    for (i, &x) in a.mass.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.mass.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    Lattice {
        offset: a.offset + b.offset,
        mass: out,
    }
}

fn check_and_normalize(l: &mut Lattice) -> Result<()> {
    let total: f64 = l.mass.iter().sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::GridTooCoarse { mass: total });
    }
    l.mass.iter_mut().for_each(|m| *m /= total);
    Ok(())
}

/// Level-`level` quantile of `Σ_k coefs[k] · W_k` with independent
/// `W_k ~ marginals[k]`, using `grid` lattice points across the combined
/// support.
pub fn sum_quantile(marginals: &[Marginal], coefs: &[f64], level: f64, grid: usize) -> Result<f64> {
    assert_eq!(marginals.len(), coefs.len());
    if !(0.0..=1.0).contains(&level) || grid < 2 {
        return Err(Error::BadParams(format!("level {level}, grid {grid}")));
    }
    let terms: Vec<(Marginal, f64)> = marginals
        .iter()
        .zip(coefs)
        .filter(|(_, &c)| c != 0.0)
        .map(|(m, &c)| (*m, c))
        .collect();
    let span: f64 = terms
        .iter()
        .map(|(m, c)| {
            let (lo, hi) = m.half_width();
            c.abs() * (hi - lo)
        })
        .sum();
    if terms.is_empty() || span == 0.0 {
        let shift: f64 = terms.iter().map(|(m, c)| c * m.half_width().0).sum();
        return Ok(shift);
    }
    let dx = span / (grid - 1) as f64;
    let mut acc = Lattice { offset: 0, mass: vec![1.0] };
    for (m, c) in &terms {
        let mut term = discretize(m, *c, dx);
        check_and_normalize(&mut term)?;
        acc = convolve(&acc, &term);
        check_and_normalize(&mut acc)?;
    }
    // CDF at the upper cell edges, linear inside each cell.
    let mut cum = 0.0;
    for (k, &m) in acc.mass.iter().enumerate() {
        if cum + m >= level && m > 0.0 {
            let frac = ((level - cum) / m).clamp(0.0, 1.0);
            let center = (acc.offset + k as i64) as f64 * dx;
            return Ok(center - 0.5 * dx + frac * dx);
        }
        cum += m;
    }
    Ok((acc.offset + acc.mass.len() as i64) as f64 * dx - 0.5 * dx)
}

/// `h_j − q` with `q` the `(1 − eps)` quantile of the weighted sum.
pub fn convolution_tighten(marginals: &[Marginal], coefs: &[f64], offset: f64, eps: f64, grid: usize) -> Result<f64> {
    Ok(offset - sum_quantile(marginals, coefs, 1.0 - eps, grid)?)
}
