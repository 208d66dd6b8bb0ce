use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{design, Design, ProblemConfig, Scheme};
use crate::disturbance::stream_rng;
use crate::error::{Error, Result};
use crate::polytope::{geometry, Polytope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMethod {
    Exact2d,
    HitOrMiss { samples: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionEstimate {
    pub method: RegionMethod,
    pub area: f64,
    /// Standard error of a hit-or-miss estimate.
    pub se: Option<f64>,
    /// Counter-clockwise vertices (exact mode).
    pub polygon: Option<Vec<[f64; 2]>>,
}

/// Exact area and CCW polygon of a bounded 2-D polytope.
pub fn exact_area(set: &Polytope) -> Result<RegionEstimate> {
    if set.dim() != 2 {
        return Err(Error::DimensionUnsupported(set.dim()));
    }
    let polygon = if set.is_empty() { Vec::new() } else { geometry::ccw_polygon(&set.vertices()?) };
    Ok(RegionEstimate {
        method: RegionMethod::Exact2d,
        area: geometry::shoelace(&polygon),
        se: None,
        polygon: Some(polygon),
    })
}

/// Volume of `{x ∈ [lo, hi] | inside(x)}` from `samples` uniform points.
pub fn hit_or_miss<F>(inside: F, lo: &DVector<f64>, hi: &DVector<f64>, samples: usize, seed: u64) -> RegionEstimate
where
    F: Fn(&DVector<f64>) -> bool + Sync,
{
    let chunks = 64usize;
    let per_chunk = samples.div_ceil(chunks);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let count = per_chunk.min(samples.saturating_sub(c * per_chunk));
            (0..count)
                .filter(|_| {
                    let x = DVector::from_fn(lo.len(), |i, _| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>());
                    inside(&x)
                })
                .count()
        })
        .sum();
    let volume: f64 = lo.iter().zip(hi.iter()).map(|(a, b)| b - a).product();
    let p = hits as f64 / samples.max(1) as f64;
    RegionEstimate {
        method: RegionMethod::HitOrMiss { samples },
        area: volume * p,
        se: Some(volume * (p * (1.0 - p) / samples.max(1) as f64).sqrt()),
        polygon: None,
    }
}

/// Size of the feasible region of `design`.
pub fn feasible_region(design: &Design, method: RegionMethod, seed: u64) -> Result<RegionEstimate> {
    let region = design.region();
    match method {
        RegionMethod::Exact2d => exact_area(region),
        RegionMethod::HitOrMiss { samples } => {
            let (lo, hi) = region.bounding_box()?;
            Ok(hit_or_miss(|x| region.contains_point(x, 0.0), &lo, &hi, samples, seed))
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub eps_f: f64,
    pub area: f64,
    /// Area relative to the tube scheme (`eps_f = 0`).
    pub relative: f64,
}

/// Feasible-region area of the proposed scheme with the mixed schedule for
/// every `eps_f` in `grid` (2-D states).
pub fn epsf_sweep(cfg: &ProblemConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(bad) = grid.iter().find(|e| !(0.0..1.0).contains(*e)) {
        return Err(Error::BadParams(format!("eps_f grid entry {bad} outside [0, 1)")));
    }
    let mut jobs: Vec<Option<f64>> = vec![None];
    jobs.extend(grid.iter().map(|&e| Some(e)));
    let areas: Vec<f64> = jobs
        .par_iter()
        .map(|job| {
            let c = match job {
                None => cfg.with_scheme(Scheme::Tube, None),
                Some(e) => cfg.with_scheme(Scheme::Proposed, Some(*e)),
            };
            design(&c)?.region().area()
        })
        .collect::<Result<_>>()?;
    let base = areas[0];
    Ok(grid
        .iter()
        .zip(&areas[1..])
        .map(|(&eps_f, &area)| SweepRow {
            eps_f,
            area,
            relative: area / base,
        })
        .collect())
}

/// Sweep table with the configuration hash repeated on every row.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], config_hash: &str, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["eps_f", "area", "relative", "config_hash"])?;
    for r in rows {
        wtr.write_record([
            format!("{}", r.eps_f),
            format!("{:e}", r.area),
            format!("{:e}", r.relative),
            config_hash.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
