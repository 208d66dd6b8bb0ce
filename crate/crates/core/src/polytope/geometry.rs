//! Vertex enumeration and convex hulls in dimensions 1 to 3.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::Polytope;
use crate::error::{Error, Result};

const FEAS_TOL: f64 = 1e-9;
const DEDUP_TOL: f64 = 1e-9;

/// Vertices of a bounded polytope (dimension ≤ 3), in no particular order.
pub fn vertices(p: &Polytope) -> Result<Vec<DVector<f64>>> {
    let d = p.dim();
    if d > 3 {
        return Err(Error::DimensionUnsupported(d));
    }
    if p.is_empty() {
        return Ok(Vec::new());
    }
    if !p.is_bounded() {
        return Err(Error::Unbounded);
    }
    let r = p.reduce();
    let (h, off) = (r.normals(), r.offsets());
    let m = r.n_rows();
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut try_subset = |idx: &[usize]| {
        let a = DMatrix::from_fn(d, d, |i, j| h[(idx[i], j)]);
        let b = DVector::from_fn(d, |i, _| off[idx[i]]);
        let Some(lu) = a.clone().lu().try_inverse() else { return };
        if lu.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return;
        }
        let x = lu * b;
        if r.max_violation(&x) <= FEAS_TOL && !out.iter().any(|v| (v - &x).amax() < DEDUP_TOL) {
            out.push(x);
        }
    };
    match d {
        1 => (0..m).for_each(|i| try_subset(&[i])),
        2 => {
            for i in 0..m {
                for j in i + 1..m {
                    try_subset(&[i, j]);
                }
            }
        }
        _ => {
            for i in 0..m {
                for j in i + 1..m {
                    for k in j + 1..m {
                        try_subset(&[i, j, k]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Convex hull as a polytope. `None` when the points do not span the space
/// (flat hulls in 2-D and 3-D) or the list is empty.
pub fn hull(points: &[DVector<f64>], dim: usize) -> Option<Polytope> {
    if points.is_empty() {
        return None;
    }
    match dim {
        1 => {
            let lo = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            Polytope::from_box(&[lo], &[hi]).ok()
        }
        2 => hull_2d(points),
        3 => hull_3d(points),
        _ => None,
    }
}

fn hull_2d(points: &[DVector<f64>]) -> Option<Polytope> {
    let poly = monotone_chain(points.iter().map(|p| [p[0], p[1]]).collect());
    if poly.len() < 3 || shoelace_arr(&poly) < 1e-14 {
        return None;
    }
    let n = poly.len();
    let mut normals = DMatrix::zeros(n, 2);
    let mut offsets = DVector::zeros(n);
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let (nx, ny) = (q[1] - p[1], -(q[0] - p[0]));
        normals[(i, 0)] = nx;
        normals[(i, 1)] = ny;
        offsets[i] = nx * p[0] + ny * p[1];
    }
    Polytope::new(normals, offsets).ok()
}

/// Counter-clockwise hull, collinear points removed.
fn monotone_chain(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let scale = pts
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let tol = 1e-12 * scale * scale;
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= tol {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= tol {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn hull_3d(points: &[DVector<f64>]) -> Option<Polytope> {
    let mut pts: Vec<Vector3<f64>> = Vec::new();
    for p in points {
        let v = Vector3::new(p[0], p[1], p[2]);
        if !pts.iter().any(|q| (q - v).amax() < 1e-12) {
            pts.push(v);
        }
    }
    if pts.len() < 4 {
        return None;
    }
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let spread = pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max).max(1e-300);
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = (p - c) / spread;
        cov += d * d.transpose();
    }
    if cov.symmetric_eigenvalues().min() < 1e-20 {
        return None;
    }
    let tol = 1e-10 * spread;
    let mut rows: Vec<(Vector3<f64>, f64)> = Vec::new();
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let nrm = (pts[j] - pts[i]).cross(&(pts[k] - pts[i]));
                let len = nrm.norm();
                if len < 1e-12 * spread * spread {
                    continue;
                }
                let nrm = nrm / len;
                let off = nrm.dot(&pts[i]);
                let mut above = false;
                let mut below = false;
                for p in &pts {
                    let s = nrm.dot(p) - off;
                    above |= s > tol;
                    below |= s < -tol;
                    if above && below {
                        break;
                    }
                }
                if !above {
                    rows.push((nrm, off));
                } else if !below {
                    rows.push((-nrm, -off));
                }
            }
        }
    }
    if rows.is_empty() {
        return None;
    }
    let normals = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i].0[j]);
    let offsets = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    Polytope::new(normals, offsets).ok()
}

/// Sorts 2-D points counter-clockwise around their centroid.
pub fn ccw_polygon(points: &[DVector<f64>]) -> Vec<[f64; 2]> {
    if points.is_empty() {
        return Vec::new();
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut v: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[1]]).collect();
    v.sort_by(|a, b| {
        let ta = (a[1] - cy).atan2(a[0] - cx);
        let tb = (b[1] - cy).atan2(b[0] - cx);
        ta.total_cmp(&tb)
    });
    v
}

pub fn shoelace(poly: &[[f64; 2]]) -> f64 {
    shoelace_arr(poly).abs()
}

fn shoelace_arr(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}
