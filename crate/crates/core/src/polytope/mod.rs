//! H-representation polytopes `{x | Hx ≤ h}`.
//!
//! Every set in the toolkit (constraints, disturbance supports, invariant
//! sets) is a [`Polytope`]. Values are immutable after construction; the
//! emptiness flag is computed lazily once and cached.
//!
//! Operations that build new sets (`reduce`, `pontryagin_diff`,
//! `minkowski_sum`, `project`, `affine_preimage`) return reduced polytopes:
//! unit-norm rows, no duplicates and no LP-redundant rows. Empty results are
//! ordinary values, represented by the single row `0ᵀx ≤ -1`.

pub mod geometry;
pub mod lp;

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use lp::LpOutcome;

/// Slack tolerance for redundancy tests.
pub const REDUNDANCY_TOL: f64 = 1e-9;
/// Tolerance for set equality in the support-function metric.
pub const EQUALITY_TOL: f64 = 1e-8;

const ZERO_ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "PolytopeJson", into = "PolytopeJson")]
pub struct Polytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
    dim: usize,
    empty: OnceLock<bool>,
}

#[derive(Serialize, Deserialize)]
struct PolytopeJson {
    #[serde(rename = "H")]
    normals: Vec<Vec<f64>>,
    #[serde(rename = "h")]
    offsets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

/// Row-by-row equality of the representation (not set equality; see
/// [`Polytope::equal`]).
impl PartialEq for Polytope {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.normals == other.normals && self.offsets == other.offsets
    }
}

impl TryFrom<PolytopeJson> for Polytope {
    type Error = Error;

    fn try_from(j: PolytopeJson) -> Result<Self> {
        let dim = match (j.normals.first(), j.dim) {
            (Some(r), _) => r.len(),
            (None, Some(d)) => d,
            (None, None) => return Err(Error::BadParams("polytope with no rows needs \"dim\"".into())),
        };
        Polytope::from_rows(&j.normals, &j.offsets, dim)
    }
}

impl From<Polytope> for PolytopeJson {
    fn from(p: Polytope) -> Self {
        let normals: Vec<Vec<f64>> = (0..p.n_rows())
            .map(|i| p.normals.row(i).iter().copied().collect())
            .collect();
        PolytopeJson {
            dim: normals.is_empty().then_some(p.dim),
            normals,
            offsets: p.offsets.iter().copied().collect(),
        }
    }
}

impl Polytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if normals.nrows() != offsets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} normals vs {} offsets",
                normals.nrows(),
                offsets.len()
            )));
        }
        if normals.ncols() == 0 {
            return Err(Error::DimensionMismatch("polytope dimension must be positive".into()));
        }
        if normals.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::BadParams("polytope data must be finite".into()));
        }
        let dim = normals.ncols();
        Ok(Self {
            normals,
            offsets,
            dim,
            empty: OnceLock::new(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], offsets: &[f64], dim: usize) -> Result<Self> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged normal rows".into()));
        }
        let normals = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        Self::new(normals, DVector::from_column_slice(offsets))
    }

    /// The whole space `ℝ^dim`.
    pub fn universe(dim: usize) -> Self {
        Self::new(DMatrix::zeros(0, dim), DVector::zeros(0)).expect("positive dimension")
    }

    /// Canonical empty set.
    pub fn empty(dim: usize) -> Self {
        let p = Self::new(DMatrix::zeros(1, dim), DVector::from_element(1, -1.0)).expect("positive dimension");
        let _ = p.empty.set(true);
        p
    }

    /// Axis-aligned box `lo ≤ x ≤ hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch("box bounds".into()));
        }
        let d = lo.len();
        let mut normals = DMatrix::zeros(2 * d, d);
        let mut offsets = DVector::zeros(2 * d);
        for i in 0..d {
            normals[(2 * i, i)] = 1.0;
            offsets[2 * i] = hi[i];
            normals[(2 * i + 1, i)] = -1.0;
            offsets[2 * i + 1] = -lo[i];
        }
        Self::new(normals, offsets)
    }

    /// The single point `{x}`.
    pub fn point(x: &[f64]) -> Self {
        Self::from_box(x, x).expect("matching lengths")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn is_empty(&self) -> bool {
        *self
            .empty
            .get_or_init(|| matches!(lp::feasible_point(&self.normals, &self.offsets), LpOutcome::Infeasible { .. }))
    }

    /// `max_{x∈P} dᵀx`.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        self.check_dim(direction.len())?;
        match lp::maximize(&self.normals, &self.offsets, direction) {
            LpOutcome::Optimal { value, .. } => Ok(value),
            LpOutcome::Infeasible { .. } => {
                let _ = self.empty.set(true);
                Err(Error::EmptySet)
            }
            LpOutcome::Unbounded => Err(Error::Unbounded),
        }
    }

    /// Maximizer of `dᵀx` over the set.
    pub fn argmax(&self, direction: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(direction.len())?;
        match lp::maximize(&self.normals, &self.offsets, direction) {
            LpOutcome::Optimal { point, .. } => Ok(point),
            LpOutcome::Infeasible { .. } => Err(Error::EmptySet),
            LpOutcome::Unbounded => Err(Error::Unbounded),
        }
    }

    /// Support of the linear image `map · P` in direction `d`, i.e.
    /// `support(P, mapᵀ d)`.
    pub fn support_image(&self, map: &DMatrix<f64>, direction: &DVector<f64>) -> Result<f64> {
        self.support(&(map.transpose() * direction))
    }

    pub fn contains_point(&self, x: &DVector<f64>, tol: f64) -> bool {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.n_rows()).all(|i| self.normals.row(i).dot(&x.transpose()) <= self.offsets[i] + tol)
    }

    /// Largest row violation `max_i (H_i x - h_i)`, `-inf` for the universe.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        (0..self.n_rows())
            .map(|i| self.normals.row(i).dot(&x.transpose()) - self.offsets[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_bounded(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        (0..self.dim).all(|i| {
            let mut e = DVector::zeros(self.dim);
            e[i] = 1.0;
            let up = self.support(&e).is_ok();
            e[i] = -1.0;
            up && self.support(&e).is_ok()
        })
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let mut lo = DVector::zeros(self.dim);
        let mut hi = DVector::zeros(self.dim);
        for i in 0..self.dim {
            let mut e = DVector::zeros(self.dim);
            e[i] = 1.0;
            hi[i] = self.support(&e)?;
            e[i] = -1.0;
            lo[i] = -self.support(&e)?;
        }
        Ok((lo, hi))
    }

    /// Center and radius of the largest inscribed Euclidean ball.
    pub fn chebyshev_center(&self) -> Result<(DVector<f64>, f64)> {
        let m = self.n_rows();
        let d = self.dim;
        let mut a = DMatrix::zeros(m + 1, d + 1);
        let mut b = DVector::zeros(m + 1);
        for i in 0..m {
            for j in 0..d {
                a[(i, j)] = self.normals[(i, j)];
            }
            a[(i, d)] = self.normals.row(i).norm();
            b[i] = self.offsets[i];
        }
        a[(m, d)] = -1.0;
        let mut obj = DVector::zeros(d + 1);
        obj[d] = 1.0;
        match lp::maximize(&a, &b, &obj) {
            LpOutcome::Optimal { point, value } => Ok((point.rows(0, d).into_owned(), value)),
            LpOutcome::Infeasible { .. } => Err(Error::EmptySet),
            LpOutcome::Unbounded => Err(Error::Unbounded),
        }
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        self.check_dim(other.dim)?;
        let m1 = self.n_rows();
        let m2 = other.n_rows();
        let mut normals = DMatrix::zeros(m1 + m2, self.dim);
        normals.rows_mut(0, m1).copy_from(&self.normals);
        normals.rows_mut(m1, m2).copy_from(&other.normals);
        let mut offsets = DVector::zeros(m1 + m2);
        offsets.rows_mut(0, m1).copy_from(&self.offsets);
        offsets.rows_mut(m1, m2).copy_from(&other.offsets);
        Polytope::new(normals, offsets)
    }

    /// `α · P` for `α ≥ 0` (scaling about the origin).
    pub fn scale(&self, alpha: f64) -> Polytope {
        assert!(alpha >= 0.0);
        if alpha == 0.0 {
            return if self.is_empty() {
                Polytope::empty(self.dim)
            } else {
                Polytope::point(&vec![0.0; self.dim])
            };
        }
        Polytope::new(self.normals.clone(), &self.offsets * alpha).expect("same shape")
    }

    /// Removes zero, duplicate and LP-redundant rows and normalizes the rest
    /// to unit length. The set itself is unchanged.
    pub fn reduce(&self) -> Polytope {
        let dim = self.dim;
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::with_capacity(self.n_rows());
        for i in 0..self.n_rows() {
            let n = self.normals.row(i).transpose();
            let norm = n.norm();
            if norm < ZERO_ROW_TOL {
                if self.offsets[i] < -REDUNDANCY_TOL {
                    return Polytope::empty(dim);
                }
                continue;
            }
            rows.push((n / norm, self.offsets[i] / norm));
        }
        dedup_parallel(&mut rows);

        let candidate = from_row_list(&rows, dim);
        if candidate.is_empty() {
            return Polytope::empty(dim);
        }

        // Sequential redundancy removal: row i is dropped when maximizing its
        // normal over the remaining rows (plus a relaxed copy of itself, which
        // keeps the LP bounded) cannot exceed its offset.
        let mut keep = vec![true; rows.len()];
        for i in 0..rows.len() {
            let others: Vec<usize> = (0..rows.len()).filter(|&k| k != i && keep[k]).collect();
            let m = others.len() + 1;
            let mut a = DMatrix::zeros(m, dim);
            let mut b = DVector::zeros(m);
            for (r, &k) in others.iter().enumerate() {
                a.row_mut(r).copy_from(&rows[k].0.transpose());
                b[r] = rows[k].1;
            }
            a.row_mut(m - 1).copy_from(&rows[i].0.transpose());
            b[m - 1] = rows[i].1 + 1.0;
            if let LpOutcome::Optimal { value, .. } = lp::maximize(&a, &b, &rows[i].0) {
                if value <= rows[i].1 + REDUNDANCY_TOL {
                    keep[i] = false;
                }
            }
        }
        let kept: Vec<(DVector<f64>, f64)> = rows
            .into_iter()
            .zip(keep)
            .filter_map(|(r, k)| k.then_some(r))
            .collect();
        let out = from_row_list(&kept, dim);
        let _ = out.empty.set(false);
        out
    }

    /// `Q ⊆ P`, checked through the support of `Q` along every row of `P`.
    pub fn contains(&self, q: &Polytope, tol: f64) -> bool {
        if self.dim != q.dim {
            return false;
        }
        if q.is_empty() {
            return true;
        }
        if self.is_empty() {
            return false;
        }
        (0..self.n_rows()).all(|i| {
            let n = self.normals.row(i).transpose();
            match q.support(&n) {
                Ok(s) => s <= self.offsets[i] + tol * n.norm().max(1.0),
                Err(_) => false,
            }
        })
    }

    pub fn equal(&self, q: &Polytope, tol: f64) -> bool {
        self.contains(q, tol) && q.contains(self, tol)
    }

    /// Pontryagin difference `P ⊖ Q = {x | x + q ∈ P ∀ q ∈ Q}`.
    pub fn pontryagin_diff(&self, q: &Polytope) -> Result<Polytope> {
        self.check_dim(q.dim)?;
        self.pontryagin_diff_image(q, &DMatrix::identity(self.dim, self.dim))
    }

    /// `P ⊖ (map · Q)` without forming the image of `Q`.
    pub fn pontryagin_diff_image(&self, q: &Polytope, map: &DMatrix<f64>) -> Result<Polytope> {
        if map.nrows() != self.dim || map.ncols() != q.dim {
            return Err(Error::DimensionMismatch(format!(
                "map {}x{} between dims {} and {}",
                map.nrows(),
                map.ncols(),
                q.dim,
                self.dim
            )));
        }
        if q.is_empty() {
            return Ok(Polytope::universe(self.dim));
        }
        let mut offsets = self.offsets.clone();
        for i in 0..self.n_rows() {
            let n = self.normals.row(i).transpose();
            match q.support_image(map, &n) {
                Ok(s) => offsets[i] -= s,
                Err(Error::Unbounded) => return Ok(Polytope::empty(self.dim)),
                Err(e) => return Err(e),
            }
        }
        Ok(Polytope::new(self.normals.clone(), offsets)?.reduce())
    }

    /// Minkowski sum `P ⊕ Q` of two bounded polytopes.
    pub fn minkowski_sum(&self, q: &Polytope) -> Result<Polytope> {
        self.check_dim(q.dim)?;
        if self.is_empty() || q.is_empty() {
            return Ok(Polytope::empty(self.dim));
        }
        if !self.is_bounded() || !q.is_bounded() {
            return Err(Error::Unbounded);
        }
        if self.dim <= 3 {
            let vp = self.vertices()?;
            let vq = q.vertices()?;
            let mut sums = Vec::with_capacity(vp.len() * vq.len());
            for a in &vp {
                for b in &vq {
                    sums.push(a + b);
                }
            }
            if let Some(hull) = geometry::hull(&sums, self.dim) {
                return Ok(hull.reduce());
            }
        }
        // Lifted form {(x, y) | y ∈ P, x - y ∈ Q}, projected onto x.
        let d = self.dim;
        let (m1, m2) = (self.n_rows(), q.n_rows());
        let mut a = DMatrix::zeros(m1 + m2, 2 * d);
        let mut b = DVector::zeros(m1 + m2);
        a.view_mut((0, d), (m1, d)).copy_from(&self.normals);
        b.rows_mut(0, m1).copy_from(&self.offsets);
        a.view_mut((m1, 0), (m2, d)).copy_from(&q.normals);
        a.view_mut((m1, d), (m2, d)).copy_from(&(-&q.normals));
        b.rows_mut(m1, m2).copy_from(&q.offsets);
        let lifted = Polytope::new(a, b)?;
        lifted.project(&(0..d).collect::<Vec<_>>())
    }

    /// `{x | M x + c ∈ P}`.
    pub fn affine_preimage(&self, map: &DMatrix<f64>, shift: &DVector<f64>) -> Result<Polytope> {
        if map.nrows() != self.dim || shift.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "preimage map {}x{} into dim {}",
                map.nrows(),
                map.ncols(),
                self.dim
            )));
        }
        let normals = &self.normals * map;
        let offsets = &self.offsets - &self.normals * shift;
        Ok(Polytope::new(normals, offsets)?.reduce())
    }

    /// Orthogonal projection onto the coordinates in `keep` (in that order),
    /// by Fourier–Motzkin elimination with a reduction after every step.
    pub fn project(&self, keep: &[usize]) -> Result<Polytope> {
        if keep.is_empty() || keep.iter().any(|&k| k >= self.dim) {
            return Err(Error::DimensionMismatch(format!("projection onto {keep:?} from dim {}", self.dim)));
        }
        let mut uniq = keep.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != keep.len() {
            return Err(Error::DimensionMismatch("repeated projection coordinate".into()));
        }
        if self.is_empty() {
            return Ok(Polytope::empty(keep.len()));
        }
        // Columns are ordered as [kept..., eliminated...]; eliminate from the back.
        let mut order: Vec<usize> = keep.to_vec();
        order.extend((0..self.dim).filter(|c| !keep.contains(c)));
        let permuted = DMatrix::from_fn(self.n_rows(), self.dim, |i, j| self.normals[(i, order[j])]);
        let mut current = Polytope::new(permuted, self.offsets.clone())?.reduce();
        while current.dim > keep.len() {
            current = current.eliminate_last();
        }
        Ok(current)
    }

    /// One Fourier–Motzkin step removing the last coordinate.
    fn eliminate_last(&self) -> Polytope {
        let d = self.dim;
        let k = d - 1;
        let new_dim = d - 1;
        if self.is_empty() {
            return Polytope::empty(new_dim);
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..self.n_rows() {
            let c = self.normals[(i, k)];
            if c > ZERO_ROW_TOL {
                pos.push(i);
            } else if c < -ZERO_ROW_TOL {
                neg.push(i);
            } else {
                rows.push((self.normals.row(i).columns(0, new_dim).transpose(), self.offsets[i]));
            }
        }
        for &p in &pos {
            let cp = self.normals[(p, k)];
            for &n in &neg {
                let cn = -self.normals[(n, k)];
                let row = self.normals.row(p).columns(0, new_dim) / cp + self.normals.row(n).columns(0, new_dim) / cn;
                rows.push((row.transpose(), self.offsets[p] / cp + self.offsets[n] / cn));
            }
        }
        if rows.is_empty() {
            return Polytope::universe(new_dim);
        }
        from_row_list(&rows, new_dim).reduce()
    }

    /// Vertices of a bounded polytope of dimension at most 3.
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        geometry::vertices(self)
    }

    /// Area of a bounded 2-D polytope.
    pub fn area(&self) -> Result<f64> {
        if self.dim != 2 {
            return Err(Error::DimensionUnsupported(self.dim));
        }
        if self.is_empty() {
            return Ok(0.0);
        }
        let v = geometry::ccw_polygon(&self.vertices()?);
        Ok(geometry::shoelace(&v))
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            Err(Error::DimensionMismatch(format!("expected dim {}, got {d}", self.dim)))
        } else {
            Ok(())
        }
    }
}

fn from_row_list(rows: &[(DVector<f64>, f64)], dim: usize) -> Polytope {
    let normals = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i].0[j]);
    let offsets = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    Polytope::new(normals, offsets).expect("finite rows")
}

/// Among rows with (numerically) identical unit normals keep the tightest.
fn dedup_parallel(rows: &mut Vec<(DVector<f64>, f64)>) {
    let mut out: Vec<(DVector<f64>, f64)> = Vec::with_capacity(rows.len());
    'outer: for (n, h) in rows.drain(..) {
        for existing in out.iter_mut() {
            if (&existing.0 - &n).amax() < 1e-12 {
                if h < existing.1 {
                    existing.1 = h;
                }
                continue 'outer;
            }
        }
        out.push((n, h));
    }
    *rows = out;
}
