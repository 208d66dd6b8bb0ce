//! Bounded i.i.d. disturbance models: samplers, polytopic supports and
//! scaled confidence regions.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polytope::{geometry, Polytope};

/// Draw count used to fit and certify confidence regions.
pub const CONFIDENCE_DRAWS: usize = 1_000_000;
/// Stream index reserved for confidence-region fitting. Every `eps_f` uses
/// the same draws, so the fitted regions are nested.
const CONFIDENCE_STREAM: u64 = u64::MAX - 1;
const MOMENT_STREAM: u64 = u64::MAX - 2;

/// Independent ChaCha stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceKind {
    /// Zero-mean Gaussian with covariance `cov`, conditioned on `‖w‖² ≤ radius_sq`.
    TruncatedGaussian {
        #[serde(with = "crate::rows::matrix")]
        cov: DMatrix<f64>,
        radius_sq: f64,
    },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    UniformPolytope { set: Polytope },
    /// Bootstrap resampling of recorded disturbances; the support is the
    /// sample hull grown by `margin`.
    Empirical {
        samples: Vec<Vec<f64>>,
        #[serde(default)]
        margin: f64,
    },
}

/// One-dimensional marginal law of a disturbance coordinate, for the
/// convolution tightening.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Marginal {
    Uniform { lo: f64, hi: f64 },
    Gaussian { sd: f64 },
    /// Gaussian with standard deviation `sd` conditioned on `|w| ≤ bound`.
    TruncatedGaussian { sd: f64, bound: f64 },
}

#[derive(Clone, Debug)]
pub struct DisturbanceModel {
    kind: DisturbanceKind,
    dim: usize,
    support: Polytope,
    facets: usize,
    seed: u64,
    sampler: Sampler,
}

#[derive(Clone, Debug)]
enum Sampler {
    Gaussian { chol: DMatrix<f64>, radius_sq: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Polytope { set: Polytope, lo: Vec<f64>, hi: Vec<f64> },
    Empirical { samples: Vec<DVector<f64>> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certification {
    Analytic,
    /// `coverage_lower` is a one-sided Hoeffding bound on the true coverage
    /// valid with confidence `1 − beta`.
    MonteCarlo {
        draws: usize,
        beta: f64,
        empirical_coverage: f64,
        coverage_lower: f64,
    },
}

/// `W_f = scale · W` with `P{w ∈ W_f} ≥ level`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub region: Polytope,
    pub level: f64,
    pub scale: f64,
    pub certified_by: Certification,
}

impl DisturbanceModel {
    /// `facets` controls the outer polytope of round supports; `seed` drives
    /// every sample this model produces.
    pub fn new(kind: DisturbanceKind, facets: usize, seed: u64) -> Result<Self> {
        let (dim, sampler) = match &kind {
            DisturbanceKind::TruncatedGaussian { cov, radius_sq } => {
                let d = cov.nrows();
                if d == 0 || cov.ncols() != d {
                    return Err(Error::DimensionMismatch("covariance must be square".into()));
                }
                if !(radius_sq.is_finite() && *radius_sq > 0.0) {
                    return Err(Error::BadParams("truncation radius must be positive".into()));
                }
                let chol = cov
                    .clone()
                    .cholesky()
                    .ok_or(Error::NotPositiveDefinite("disturbance covariance"))?
                    .l();
                (d, Sampler::Gaussian { chol, radius_sq: *radius_sq })
            }
            DisturbanceKind::UniformBox { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(Error::DimensionMismatch("box bounds".into()));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                    return Err(Error::BadParams("box bounds must satisfy lo <= hi".into()));
                }
                (lo.len(), Sampler::Box { lo: lo.clone(), hi: hi.clone() })
            }
            DisturbanceKind::UniformPolytope { set } => {
                if set.is_empty() {
                    return Err(Error::BadParams("disturbance polytope is empty".into()));
                }
                let (lo, hi) = set.bounding_box()?;
                (
                    set.dim(),
                    Sampler::Polytope {
                        set: set.clone(),
                        lo: lo.iter().copied().collect(),
                        hi: hi.iter().copied().collect(),
                    },
                )
            }
            DisturbanceKind::Empirical { samples, margin } => {
                let d = samples.first().map_or(0, |s| s.len());
                if d == 0 || samples.iter().any(|s| s.len() != d) {
                    return Err(Error::BadParams("empirical samples must be non-empty rows of equal length".into()));
                }
                if !(*margin >= 0.0) {
                    return Err(Error::BadParams("margin must be nonnegative".into()));
                }
                let samples = samples.iter().map(|s| DVector::from_column_slice(s)).collect();
                (d, Sampler::Empirical { samples })
            }
        };
        let support = support_of(&kind, dim, facets)?;
        Ok(Self {
            kind,
            dim,
            support,
            facets,
            seed,
            sampler,
        })
    }

    /// Reads empirical disturbance samples from CSV, one sample per row,
    /// no header.
    pub fn empirical_from_csv(path: &std::path::Path, margin: f64, seed: u64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
        let mut samples = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            samples.push(row.map_err(|e| Error::BadParams(format!("{}: {e}", path.display())))?);
        }
        Self::new(DisturbanceKind::Empirical { samples, margin }, 0, seed)
    }

    pub fn kind(&self) -> &DisturbanceKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same model driven by another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Outer polytopic approximation `W` of the support.
    pub fn support(&self) -> &Polytope {
        &self.support
    }

    pub fn facets(&self) -> usize {
        self.facets
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        stream_rng(self.seed, stream)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match &self.sampler {
            Sampler::Gaussian { chol, radius_sq } => loop {
                let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                let w = chol * z;
                if w.norm_squared() <= *radius_sq {
                    return w;
                }
            },
            Sampler::Box { lo, hi } => DVector::from_fn(self.dim, |i, _| uniform(rng, lo[i], hi[i])),
            Sampler::Polytope { set, lo, hi } => loop {
                let w = DVector::from_fn(self.dim, |i, _| uniform(rng, lo[i], hi[i]));
                if set.contains_point(&w, 0.0) {
                    return w;
                }
            },
            Sampler::Empirical { samples } => samples[rng.random_range(0..samples.len())].clone(),
        }
    }

    /// `count` i.i.d. sequences of length `horizon` from stream 0.
    pub fn sample(&self, count: usize, horizon: usize) -> Result<Vec<Vec<DVector<f64>>>> {
        self.sample_stream(count, horizon, 0)
    }

    pub fn sample_stream(&self, count: usize, horizon: usize, stream: u64) -> Result<Vec<Vec<DVector<f64>>>> {
        if count == 0 || horizon == 0 {
            return Err(Error::BadParams("count and horizon must be at least 1".into()));
        }
        let mut rng = self.rng(stream);
        Ok((0..count)
            .map(|_| (0..horizon).map(|_| self.draw(&mut rng)).collect())
            .collect())
    }

    /// `E[w wᵀ]`: exact for boxes and empirical data, otherwise estimated
    /// from [`CONFIDENCE_DRAWS`] draws.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.dim;
        match &self.sampler {
            Sampler::Box { lo, hi } => DMatrix::from_fn(d, d, |i, j| {
                if i == j {
                    (lo[i] * lo[i] + lo[i] * hi[i] + hi[i] * hi[i]) / 3.0
                } else {
                    0.25 * (lo[i] + hi[i]) * (lo[j] + hi[j])
                }
            }),
            Sampler::Empirical { samples } => {
                let mut m = DMatrix::zeros(d, d);
                for s in samples {
                    m += s * s.transpose();
                }
                m / samples.len() as f64
            }
            _ => {
                let mut rng = self.rng(MOMENT_STREAM);
                let mut m = DMatrix::zeros(d, d);
                for _ in 0..CONFIDENCE_DRAWS {
                    let w = self.draw(&mut rng);
                    m.ger(1.0, &w, &w, 1.0);
                }
                m / CONFIDENCE_DRAWS as f64
            }
        }
    }

    /// Per-coordinate marginals, when the model has a natural description.
    /// For the radially truncated Gaussian the coordinates are not
    /// independent; the returned marginals are an approximation that
    /// truncates each coordinate at the radius.
    pub fn marginals(&self) -> Option<Vec<Marginal>> {
        match &self.kind {
            DisturbanceKind::UniformBox { lo, hi } => Some(
                lo.iter()
                    .zip(hi)
                    .map(|(&lo, &hi)| Marginal::Uniform { lo, hi })
                    .collect(),
            ),
            DisturbanceKind::TruncatedGaussian { cov, radius_sq } => {
                let off_diag = (0..self.dim).any(|i| (0..self.dim).any(|j| i != j && cov[(i, j)] != 0.0));
                if off_diag {
                    return None;
                }
                Some(
                    (0..self.dim)
                        .map(|i| Marginal::TruncatedGaussian {
                            sd: cov[(i, i)].sqrt(),
                            bound: radius_sq.sqrt(),
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Smallest scaled copy `α·W` with empirical coverage at least
    /// `1 − eps_f` over [`CONFIDENCE_DRAWS`] draws (40-step bisection on
    /// `α`), certified at confidence `1 − beta`.
    pub fn confidence_region(&self, eps_f: f64, beta: f64) -> Result<ConfidenceRegion> {
        if !(0.0..1.0).contains(&eps_f) {
            return Err(Error::BadParams(format!("eps_f = {eps_f} outside [0, 1)")));
        }
        if eps_f == 0.0 {
            return Ok(ConfidenceRegion {
                region: self.support.clone(),
                level: 1.0,
                scale: 1.0,
                certified_by: Certification::Analytic,
            });
        }
        let gauges = self.gauge_draws()?;
        let n = gauges.len();
        let coverage = |alpha: f64| gauges.partition_point(|&g| g <= alpha) as f64 / n as f64;
        let target = 1.0 - eps_f;
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if coverage(mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let empirical_coverage = coverage(hi);
        let coverage_lower = empirical_coverage - ((1.0 / beta).ln() / (2.0 * n as f64)).sqrt();
        Ok(ConfidenceRegion {
            region: self.support.scale(hi),
            level: target,
            scale: hi,
            certified_by: Certification::MonteCarlo {
                draws: n,
                beta,
                empirical_coverage,
                coverage_lower,
            },
        })
    }

    /// Sorted gauge values `max_i H_i w / h_i` of the support for the fixed
    /// confidence-fitting draws.
    fn gauge_draws(&self) -> Result<Vec<f64>> {
        let h = self.support.normals();
        let off = self.support.offsets();
        if off.iter().any(|&o| o <= 0.0) {
            return Err(Error::BadParams(
                "confidence regions need the origin in the interior of the support".into(),
            ));
        }
        let mut rng = self.rng(CONFIDENCE_STREAM);
        let mut gauges: Vec<f64> = (0..CONFIDENCE_DRAWS)
            .map(|_| {
                let w = self.draw(&mut rng);
                (0..h.nrows())
                    .map(|i| h.row(i).dot(&w.transpose()) / off[i])
                    .fold(0.0, f64::max)
            })
            .collect();
        gauges.sort_unstable_by(f64::total_cmp);
        Ok(gauges)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}

/// Polytope with `facets` normals at uniform angles, tangent to the disc of
/// the given radius (2-D only).
pub fn circumscribed_polygon(radius: f64, facets: usize) -> Result<Polytope> {
    if facets < 3 {
        return Err(Error::BadParams("need at least 3 facets".into()));
    }
    let normals = DMatrix::from_fn(facets, 2, |k, j| {
        let t = 2.0 * PI * k as f64 / facets as f64;
        if j == 0 {
            t.cos()
        } else {
            t.sin()
        }
    });
    Polytope::new(normals, DVector::from_element(facets, radius))
}

fn support_of(kind: &DisturbanceKind, dim: usize, facets: usize) -> Result<Polytope> {
    match kind {
        DisturbanceKind::TruncatedGaussian { radius_sq, .. } => {
            let r = radius_sq.sqrt();
            if dim == 2 {
                if facets < 3 {
                    return Err(Error::BadParams("support polygon needs at least 3 facets".into()));
                }
                circumscribed_polygon(r, facets)
            } else {
                Polytope::from_box(&vec![-r; dim], &vec![r; dim])
            }
        }
        DisturbanceKind::UniformBox { lo, hi } => Polytope::from_box(lo, hi),
        DisturbanceKind::UniformPolytope { set } => Ok(set.clone()),
        DisturbanceKind::Empirical { samples, margin } => {
            let pts: Vec<DVector<f64>> = samples.iter().map(|s| DVector::from_column_slice(s)).collect();
            let hull = if dim <= 3 { geometry::hull(&pts, dim) } else { None };
            let base = match hull {
                Some(h) => h.reduce(),
                None => {
                    let lo: Vec<f64> = (0..dim).map(|i| pts.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min)).collect();
                    let hi: Vec<f64> = (0..dim).map(|i| pts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max)).collect();
                    Polytope::from_box(&lo, &hi)?
                }
            };
            let grown = base.offsets().add_scalar(*margin);
            Polytope::new(base.normals().clone(), grown)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn example_model(seed: u64) -> DisturbanceModel {
        DisturbanceModel::new(
            DisturbanceKind::TruncatedGaussian {
                cov: DMatrix::identity(2, 2) * 0.04f64.powi(2),
                radius_sq: 0.02,
            },
            8,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn truncation_respected() {
        let m = example_model(1);
        let batch = m.sample(2000, 5).unwrap();
        assert!(batch.iter().flatten().all(|w| w.norm_squared() <= 0.02));
    }

    #[test]
    fn determinism_and_seed_change() {
        let a = example_model(7).sample(10, 3).unwrap();
        let b = example_model(7).sample(10, 3).unwrap();
        let c = example_model(8).sample(10, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_variance() {
        let a = 0.3;
        let m = DisturbanceModel::new(
            DisturbanceKind::UniformBox { lo: vec![-a], hi: vec![a] },
            0,
            5,
        )
        .unwrap();
        let xs: Vec<f64> = m.sample(100_000, 1).unwrap().iter().map(|s| s[0][0]).collect();
        let n = xs.len() as f64;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n;
        // Var of w² for uniform: a⁴/5 − a⁴/9.
        let se = ((a.powi(4) / 5.0 - a.powi(4) / 9.0) / n).sqrt();
        assert!((var - a * a / 3.0).abs() < 3.0 * se);
        assert!((m.second_moment()[(0, 0)] - a * a / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_mean() {
        let m = example_model(11);
        let n = 100_000;
        let mut rng = m.rng(0);
        let mut mean = DVector::zeros(2);
        for _ in 0..n {
            mean += m.draw(&mut rng);
        }
        mean /= n as f64;
        assert!(mean.amax() <= 4.0 * 0.04 / (n as f64).sqrt());
    }

    #[test]
    fn octagon_support() {
        let m = example_model(0);
        let w = m.support();
        assert_eq!(w.n_rows(), 8);
        let r = 0.02f64.sqrt();
        assert!(w.offsets().iter().all(|&o| (o - r).abs() < 1e-15));
        // The support value along (0, 1) is attained at a vertex; compare
        // against the vertex list.
        let d = dvector![0.0, 1.0];
        let best = w.vertices().unwrap().iter().map(|v| v.dot(&d)).fold(f64::MIN, f64::max);
        assert!((w.support(&d).unwrap() - best).abs() < 1e-12);
        assert!((best - r).abs() < 1e-12);
    }

    #[test]
    fn box_support_is_box() {
        let m = DisturbanceModel::new(
            DisturbanceKind::UniformBox { lo: vec![-1.0, -2.0], hi: vec![1.0, 2.0] },
            16,
            0,
        )
        .unwrap();
        assert!(m.support().equal(&Polytope::from_box(&[-1.0, -2.0], &[1.0, 2.0]).unwrap(), 1e-12));
    }

    #[test]
    fn uniform_interval_half_coverage() {
        let m = DisturbanceModel::new(DisturbanceKind::UniformBox { lo: vec![-1.0], hi: vec![1.0] }, 0, 3).unwrap();
        let cr = m.confidence_region(0.5, 1e-4).unwrap();
        assert!((cr.scale - 0.5).abs() < 0.005, "{}", cr.scale);
        let full = m.confidence_region(0.0, 1e-4).unwrap();
        assert!(full.region.equal(m.support(), 0.0));
        assert_eq!(full.certified_by, Certification::Analytic);
    }

    #[test]
    fn confidence_regions_nest_and_cover() {
        let m = example_model(21);
        let a = m.confidence_region(0.05, 1e-4).unwrap();
        let b = m.confidence_region(0.2, 1e-4).unwrap();
        assert!(a.region.contains(&b.region, 1e-12));
        assert!(m.support().contains(&a.region, 1e-12));
        // Fresh-draw coverage.
        let fresh = m.with_seed(99);
        let mut rng = fresh.rng(0);
        let n = 100_000;
        let hits = (0..n).filter(|_| a.region.contains_point(&fresh.draw(&mut rng), 0.0)).count();
        let se = (0.95 * 0.05 / n as f64).sqrt();
        assert!(hits as f64 / n as f64 >= 0.95 - 3.0 * se);
    }

    #[test]
    fn empirical_support_contains_samples() {
        let samples = vec![vec![0.1, 0.0], vec![-0.1, 0.05], vec![0.0, -0.1], vec![0.02, 0.02]];
        let m = DisturbanceModel::new(DisturbanceKind::Empirical { samples: samples.clone(), margin: 0.01 }, 0, 0).unwrap();
        for s in &samples {
            assert!(m.support().contains_point(&DVector::from_column_slice(s), -0.005));
        }
        let batch = m.sample(50, 2).unwrap();
        assert!(batch.iter().flatten().all(|w| samples.iter().any(|s| s[0] == w[0] && s[1] == w[1])));
    }
}
