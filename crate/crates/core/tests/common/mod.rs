//! Brute-force polytope oracles and random instances shared by the
//! integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smpc_core::Polytope;

pub const ORACLE_TOL: f64 = 1e-6;

/// Every intersection of `dim` rows that satisfies all rows (within `1e-9`).
pub fn brute_vertices(p: &Polytope) -> Vec<DVector<f64>> {
    let (h, o) = (p.normals(), p.offsets());
    let (m, n) = (h.nrows(), h.ncols());
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    if m < n {
        return out;
    }
    loop {
        let a = DMatrix::from_fn(n, n, |i, j| h[(idx[i], j)]);
        let b = DVector::from_fn(n, |i, _| o[idx[i]]);
        if a.determinant().abs() > 1e-10 {
            if let Some(x) = a.lu().solve(&b) {
                let slack = (h * &x - o).max();
                if slack <= 1e-9 * (1.0 + o.amax()) && !out.iter().any(|v| (v - &x).amax() < 1e-9) {
                    out.push(x);
                }
            }
        }
        // Next combination in lexicographic order.
        let mut i = n;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] < m - n + i {
                idx[i] += 1;
                for j in i + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn vertex_support(vertices: &[DVector<f64>], d: &DVector<f64>) -> f64 {
    vertices.iter().map(|v| v.dot(d)).fold(f64::NEG_INFINITY, f64::max)
}

/// Random bounded polytope with the origin inside: `rows` random unit
/// normals with offsets in `[lo, hi]`, plus the box `|x_i| ≤ bound`.
pub fn random_polytope(rng: &mut ChaCha8Rng, dim: usize, rows: usize, lo: f64, hi: f64, bound: f64) -> Polytope {
    let mut normals: Vec<Vec<f64>> = Vec::new();
    let mut offsets = Vec::new();
    for _ in 0..rows {
        let v = DVector::from_fn(dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let v = v.normalize();
        normals.push(v.iter().copied().collect());
        offsets.push(lo + (hi - lo) * rng.random::<f64>());
    }
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; dim];
            e[i] = s;
            normals.push(e);
            offsets.push(bound);
        }
    }
    Polytope::from_rows(&normals, &offsets, dim).unwrap()
}

pub fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random::<f64>() * 2.0 - 1.0).normalize()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest support mismatch between two vertex sets over `dirs`.
pub fn support_gap(a: &[DVector<f64>], b: &[DVector<f64>], dirs: &[DVector<f64>]) -> f64 {
    dirs.iter()
        .map(|d| (vertex_support(a, d) - vertex_support(b, d)).abs())
        .fold(0.0, f64::max)
}

/// Test directions: `count` random unit vectors plus the coordinate axes.
pub fn directions(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<DVector<f64>> {
    let mut dirs: Vec<DVector<f64>> = (0..count).map(|_| random_direction(rng, dim)).collect();
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(dim);
            e[i] = s;
            dirs.push(e);
        }
    }
    dirs
}

/// Outcome of the oracle comparisons on one random instance.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleGaps {
    pub minkowski: f64,
    pub pontryagin: f64,
    pub project: f64,
    pub preimage: f64,
    /// Largest violation of `P` by a vertex sum of `P ⊖ Q` and `Q`.
    pub erosion_roundtrip: f64,
    pub grid_mismatches: usize,
}

impl OracleGaps {
    pub fn worst(&self) -> f64 {
        self.minkowski.max(self.pontryagin).max(self.project).max(self.preimage)
    }
}

/// Compares the four set operations against vertex and grid oracles on a
/// random instance of dimension `dim` (2 or 3).
pub fn oracle_instance(seed: u64, dim: usize) -> OracleGaps {
    let mut r = rng(seed);
    let rows = dim + 2 + r.random_range(0..5);
    let p = random_polytope(&mut r, dim, rows, 0.6, 1.4, 1.8);
    let q_rows = dim + 1 + r.random_range(0..3);
    let q = random_polytope(&mut r, dim, q_rows, 0.05, 0.3, 0.3);
    let dirs = directions(&mut r, dim, 40);
    let vp = brute_vertices(&p);
    let vq = brute_vertices(&q);
    let mut gaps = OracleGaps::default();

    let sum = p.minkowski_sum(&q).unwrap();
    let sums: Vec<DVector<f64>> = vp.iter().flat_map(|a| vq.iter().map(move |b| a + b)).collect();
    gaps.minkowski = support_gap(&brute_vertices(&sum), &sums, &dirs);

    let diff = p.pontryagin_diff(&q).unwrap();
    let mut brute_offsets = p.offsets().clone();
    for i in 0..p.n_rows() {
        brute_offsets[i] -= vertex_support(&vq, &p.normals().row(i).transpose());
    }
    let brute_diff = Polytope::new(p.normals().clone(), brute_offsets).unwrap();
    let vd = brute_vertices(&diff);
    gaps.pontryagin = support_gap(&vd, &brute_vertices(&brute_diff), &dirs);
    for v in &vd {
        for w in &vq {
            gaps.erosion_roundtrip = gaps.erosion_roundtrip.max(p.max_violation(&(v + w)));
        }
    }
    // Grid oracle for the difference: x ∈ P ⊖ Q iff x + q ∈ P at every
    // vertex q, judged only away from the boundary.
    let steps = if dim == 2 { 41 } else { 13 };
    let mut idx = vec![0usize; dim];
    loop {
        let x = DVector::from_fn(dim, |i, _| -2.0 + 4.0 * idx[i] as f64 / (steps - 1) as f64);
        let margin = vq.iter().map(|w| p.max_violation(&(&x + w))).fold(f64::NEG_INFINITY, f64::max);
        if margin.abs() > 1e-6 && (margin < 0.0) != diff.contains_point(&x, 0.0) {
            gaps.grid_mismatches += 1;
        }
        let mut i = 0;
        while i < dim {
            idx[i] += 1;
            if idx[i] < steps {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
        if i == dim {
            break;
        }
    }

    let keep: Vec<usize> = (0..dim - 1).collect();
    let proj = p.project(&keep).unwrap();
    let proj_oracle: Vec<DVector<f64>> = vp.iter().map(|v| DVector::from_fn(keep.len(), |i, _| v[keep[i]])).collect();
    let pdirs = directions(&mut r, keep.len(), 20);
    gaps.project = if keep.len() == 1 {
        let (lo, hi) = proj.bounding_box().unwrap();
        let (olo, ohi) = (
            proj_oracle.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min),
            proj_oracle.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max),
        );
        (lo[0] - olo).abs().max((hi[0] - ohi).abs())
    } else {
        support_gap(&brute_vertices(&proj), &proj_oracle, &pdirs)
    };

    let map = loop {
        let m = DMatrix::from_fn(dim, dim, |_, _| r.random::<f64>() * 2.0 - 1.0);
        if m.determinant().abs() > 0.2 {
            break m;
        }
    };
    let shift = DVector::from_fn(dim, |_, _| 0.2 * (r.random::<f64>() - 0.5));
    let pre = p.affine_preimage(&map, &shift).unwrap();
    let inv = map.clone().try_inverse().unwrap();
    let pre_oracle: Vec<DVector<f64>> = vp.iter().map(|v| &inv * (v - &shift)).collect();
    gaps.preimage = support_gap(&brute_vertices(&pre), &pre_oracle, &dirs);
    gaps
}
