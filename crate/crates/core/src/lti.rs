//! Discrete-time LTI model `x⁺ = A x + B u + B_w w`, LQR synthesis and the
//! closed-loop error propagation used by the tightening routines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DARE_TOL: f64 = 1e-12;
const DARE_STALL: usize = 10_000;
const SCHUR_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LtiSystem {
    #[serde(rename = "A", with = "crate::rows::matrix")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "crate::rows::matrix")]
    pub b: DMatrix<f64>,
    #[serde(rename = "Bw", with = "crate::rows::matrix")]
    pub bw: DMatrix<f64>,
    #[serde(rename = "Q", with = "crate::rows::matrix")]
    pub q: DMatrix<f64>,
    #[serde(rename = "R", with = "crate::rows::matrix")]
    pub r: DMatrix<f64>,
    #[serde(rename = "T")]
    pub horizon: usize,
}

impl LtiSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        bw: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let sys = Self { a, b, bw, q, r, horizon };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let mismatch = |what: &str| Err(Error::DimensionMismatch(what.to_string()));
        if n == 0 || self.a.ncols() != n {
            return mismatch("A must be square and non-empty");
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            return mismatch("B must have as many rows as A");
        }
        if self.bw.nrows() != n || self.bw.ncols() == 0 {
            return mismatch("Bw must have as many rows as A");
        }
        if self.q.shape() != (n, n) {
            return mismatch("Q must be n x n");
        }
        let m = self.b.ncols();
        if self.r.shape() != (m, m) {
            return mismatch("R must be m x m");
        }
        if self.horizon == 0 {
            return Err(Error::BadParams("horizon must be at least 1".into()));
        }
        if !is_symmetric(&self.q) || self.q.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("Q must be symmetric positive definite"));
        }
        if !is_symmetric(&self.r) || self.r.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("R must be symmetric positive definite"));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn nw(&self) -> usize {
        self.bw.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.bw * w
    }

    /// Nominal states `z_0 … z_T` under `z⁺ = A z + B v`.
    pub fn nominal_rollout(&self, z0: &DVector<f64>, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(z0.clone());
        for v in inputs {
            let next = &self.a * out.last().expect("non-empty") + &self.b * v;
            out.push(next);
        }
        out
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-10 * scale
}

/// LQR feedback `u = K x` (`K` is `m × n`), terminal weight `P` and the
/// closed loop `A + B K`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerGains {
    #[serde(rename = "K", with = "crate::rows::matrix")]
    pub gain: DMatrix<f64>,
    /// Solution of `A_clᵀ P A_cl + Q + Kᵀ R K = P`.
    #[serde(rename = "P", with = "crate::rows::matrix")]
    pub terminal_weight: DMatrix<f64>,
    #[serde(rename = "A_cl", with = "crate::rows::matrix")]
    pub closed_loop: DMatrix<f64>,
    pub spectral_radius: f64,
}

impl ControllerGains {
    /// `Q + Kᵀ R K`, the stage weight of the error under feedback.
    pub fn error_weight(&self, sys: &LtiSystem) -> DMatrix<f64> {
        &sys.q + self.gain.transpose() * &sys.r * &self.gain
    }

    /// Constant part of the expected finite-horizon cost,
    /// `Σ_{i<T} E‖e_i‖²_{Q+KᵀRK} + E‖e_T‖²_P`, from the covariance
    /// recursion `Σ_{i+1} = A_cl Σ_i A_clᵀ + B_w Σ_w B_wᵀ`, `Σ_0 = 0`.
    pub fn cost_constant(&self, sys: &LtiSystem, disturbance_cov: &DMatrix<f64>) -> f64 {
        let n = sys.nx();
        let weight = self.error_weight(sys);
        let inject = &sys.bw * disturbance_cov * sys.bw.transpose();
        let mut cov = DMatrix::zeros(n, n);
        let mut total = 0.0;
        for _ in 0..sys.horizon {
            total += (&weight * &cov).trace();
            cov = &self.closed_loop * &cov * self.closed_loop.transpose() + &inject;
        }
        total + (&self.terminal_weight * &cov).trace()
    }
}

/// LQR synthesis: Riccati fixed point for `K`, then the Lyapunov equation
/// of the closed loop for `P`.
pub fn lqr_synthesize(sys: &LtiSystem) -> Result<ControllerGains> {
    let p_dare = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r)?;
    let gain = lqr_gain(&sys.a, &sys.b, &sys.r, &p_dare)?;
    let closed_loop = &sys.a + &sys.b * &gain;
    if !is_schur(&closed_loop) {
        return Err(Error::NotSchur(spectral_radius(&closed_loop)));
    }
    let weight = &sys.q + gain.transpose() * &sys.r * &gain;
    let terminal_weight = lyapunov_solve(&closed_loop, &weight)?;
    Ok(ControllerGains {
        spectral_radius: spectral_radius(&closed_loop),
        gain,
        terminal_weight,
        closed_loop,
    })
}

/// `K = -(R + BᵀPB)⁻¹ BᵀPA`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = r + b.transpose() * p * b;
    let chol = s.cholesky().ok_or(Error::NotPositiveDefinite("R + BᵀPB"))?;
    Ok(-chol.solve(&(b.transpose() * p * a)))
}

fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let s = r + b.transpose() * p * b;
    let chol = s.cholesky()?;
    let pb = a.transpose() * p * b;
    let next = q + a.transpose() * p * a - &pb * chol.solve(&pb.transpose());
    Some((&next + next.transpose()) * 0.5)
}

/// Relative residual of the Riccati equation at `p`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    match riccati_map(a, b, q, r, p) {
        Some(next) => (next - p).amax() / p.amax().max(1.0),
        None => f64::INFINITY,
    }
}

/// Stabilizing solution of `P = Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA` by
/// iterating the Riccati map from `P = Q`. Fails when the residual has not
/// improved for [`DARE_STALL`] consecutive iterations.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    loop {
        let next = riccati_map(a, b, q, r, &p).ok_or(Error::NotStabilizable)?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NotStabilizable);
        }
        let residual = (&next - &p).amax() / next.amax().max(1.0);
        p = next;
        if residual <= DARE_TOL {
            return Ok(p);
        }
        if residual < best {
            best = residual;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= DARE_STALL {
                return Err(Error::NotStabilizable);
            }
        }
    }
}

/// Solution `X` of `X = AᵀXA + M` for Schur-stable `A` (doubling iteration).
pub fn lyapunov_solve(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_schur(a) {
        return Err(Error::NotSchur(spectral_radius(a)));
    }
    let mut x = m.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let inc = ak.transpose() * &x * &ak;
        x += &inc;
        ak = &ak * &ak;
        if ak.amax() < 1e-18 || inc.amax() <= 1e-17 * x.amax() {
            break;
        }
    }
    Ok((&x + x.transpose()) * 0.5)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Schur test by norm decay: some power `A^k`, `k ≤ 512`, has spectral norm
/// below `1 − 10⁻⁶`. Powers are formed by repeated squaring.
pub fn is_schur(a: &DMatrix<f64>) -> bool {
    let mut power = a.clone();
    let mut k = 1usize;
    loop {
        let norm = power.clone().singular_values().max();
        if !norm.is_finite() {
            return false;
        }
        if norm < 1.0 - SCHUR_MARGIN {
            return true;
        }
        if k >= 512 || norm > 1e150 {
            return false;
        }
        power = &power * &power;
        k *= 2;
    }
}

/// Precomputed maps `A_cl^i B_w`, `i = 0 … horizon`, through which a
/// disturbance injected `i + 1` steps earlier reaches the current error.
#[derive(Clone, Debug)]
pub struct ErrorPropagation {
    maps: Vec<DMatrix<f64>>,
    closed_loop: DMatrix<f64>,
    bw: DMatrix<f64>,
}

impl ErrorPropagation {
    pub fn new(closed_loop: &DMatrix<f64>, bw: &DMatrix<f64>, horizon: usize) -> Self {
        let mut maps = Vec::with_capacity(horizon + 1);
        maps.push(bw.clone());
        for i in 0..horizon {
            let next = closed_loop * &maps[i];
            maps.push(next);
        }
        Self {
            maps,
            closed_loop: closed_loop.clone(),
            bw: bw.clone(),
        }
    }

    /// `A_cl^i B_w`.
    pub fn map(&self, i: usize) -> &DMatrix<f64> {
        &self.maps[i]
    }

    pub fn horizon(&self) -> usize {
        self.maps.len() - 1
    }

    /// One error step `e⁺ = A_cl e + B_w w`.
    pub fn step(&self, e: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.closed_loop * e + &self.bw * w
    }

    /// `e_l = Σ_{i<l} A_cl^{l−1−i} B_w w_i` from the precomputed powers.
    pub fn error_at(&self, l: usize, ws: &[DVector<f64>]) -> DVector<f64> {
        assert!(ws.len() >= l && l <= self.horizon() + 1);
        let mut e = DVector::zeros(self.closed_loop.nrows());
        for (i, w) in ws.iter().enumerate().take(l) {
            e.gemv(1.0, &self.maps[l - 1 - i], w, 1.0);
        }
        e
    }

    /// `e_l` for every sequence of a batch.
    pub fn error_samples(&self, l: usize, batch: &[Vec<DVector<f64>>]) -> Vec<DVector<f64>> {
        batch.iter().map(|ws| self.error_at(l, ws)).collect()
    }

    /// Errors `e_1 … e_n` from `e_0 = 0` driven by `ws`, by the step recursion.
    pub fn errors(&self, ws: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.closed_loop.nrows();
        let mut e = DVector::zeros(n);
        ws.iter()
            .map(|w| {
                e = self.step(&e, w);
                e.clone()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    pub(crate) fn example_system() -> LtiSystem {
        LtiSystem::new(
            dmatrix![1.0, 0.0075; -0.143, 0.996],
            dmatrix![4.798; 0.115],
            DMatrix::identity(2, 2),
            dmatrix![1.0, 0.0; 0.0, 10.0],
            dmatrix![1.0],
            8,
        )
        .unwrap()
    }

    #[test]
    fn scalar_dare_matches_closed_form() {
        // a = b = q = r = 1: P² − P − 1 = 0.
        let one = dmatrix![1.0];
        let p = solve_dare(&one, &one, &one, &one).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - golden).abs() < 1e-12);
        let k = lqr_gain(&one, &one, &one, &p).unwrap();
        assert!((k[(0, 0)] + golden / (1.0 + golden)).abs() < 1e-12);
    }

    #[test]
    fn scalar_half_gain() {
        // a = 0.5, b = q = r = 1: P = 1 + 0.25 P / (1 + P), i.e. P² − 0.25 P − 1 = 0.
        let sys = LtiSystem::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0], 3).unwrap();
        let root = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
        let g = lqr_synthesize(&sys).unwrap();
        assert!((g.gain[(0, 0)] + root * 0.5 / (1.0 + root)).abs() < 1e-12);
        let acl = g.closed_loop[(0, 0)];
        let k = g.gain[(0, 0)];
        assert!((g.terminal_weight[(0, 0)] - (1.0 + k * k) / (1.0 - acl * acl)).abs() < 1e-10);
    }

    #[test]
    fn spectral_radius_shrinks_with_input_weight() {
        let base = example_system();
        let mut last = f64::INFINITY;
        for r in [10.0, 1.0, 0.1, 0.01, 0.001] {
            // Fully actuated variant: B = I, so R → 0 tends to deadbeat.
            let mut sys = base.clone();
            sys.b = DMatrix::identity(2, 2);
            sys.r = DMatrix::identity(2, 2) * r;
            let rho = lqr_synthesize(&sys).unwrap().spectral_radius;
            assert!(rho <= last + 1e-12, "r = {r}: {rho} > {last}");
            last = rho;
        }
        assert!(last < 0.01);
    }

    #[test]
    fn lyapunov_trivial_cases() {
        let m = dmatrix![2.0, 0.5; 0.5, 1.0];
        assert!((lyapunov_solve(&DMatrix::zeros(2, 2), &m).unwrap() - &m).amax() < 1e-15);
        let x = lyapunov_solve(&dmatrix![0.5], &dmatrix![1.0]).unwrap();
        assert!((x[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rollout_cases() {
        let sys = LtiSystem::new(DMatrix::identity(2, 2), dmatrix![1.0; 0.0], DMatrix::identity(2, 2), DMatrix::identity(2, 2), dmatrix![1.0], 3).unwrap();
        let z0 = DVector::from_vec(vec![1.0, -2.0]);
        let zero = vec![DVector::zeros(1); 3];
        assert!(sys.nominal_rollout(&z0, &zero).iter().all(|z| z == &z0));
        let ex = example_system();
        let v: Vec<DVector<f64>> = (0..4).map(|i| DVector::from_element(1, 0.1 * i as f64 - 0.15)).collect();
        let z = ex.nominal_rollout(&z0, &v);
        // Unrolled polynomial: z_l = A^l z0 + Σ_{i<l} A^{l−1−i} B v_i.
        for l in 0..=4 {
            let mut direct = ex.a.pow(l as u32) * &z0;
            for (i, vi) in v.iter().enumerate().take(l) {
                direct += ex.a.pow((l - 1 - i) as u32) * &ex.b * vi;
            }
            assert!((&z[l] - direct).amax() < 1e-12);
        }
        let zeros = ex.nominal_rollout(&DVector::zeros(2), &vec![DVector::zeros(1); 4]);
        assert!(zeros.iter().all(|z| z.amax() == 0.0));
    }

    #[test]
    fn cost_constant_matches_monte_carlo() {
        use rand::{Rng, SeedableRng};
        let sys = example_system();
        let g = lqr_synthesize(&sys).unwrap();
        let half = 0.1;
        let cov = DMatrix::identity(2, 2) * (half * half / 3.0);
        let c = g.cost_constant(&sys, &cov);
        let prop = ErrorPropagation::new(&g.closed_loop, &sys.bw, sys.horizon);
        let weight = g.error_weight(&sys);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let ws: Vec<DVector<f64>> = (0..sys.horizon)
                .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-half..half)))
                .collect();
            let errs = prop.errors(&ws);
            let mut total = 0.0;
            for e in errs.iter().take(sys.horizon - 1) {
                total += (e.transpose() * &weight * e)[(0, 0)];
            }
            let et = &errs[sys.horizon - 1];
            total += (et.transpose() * &g.terminal_weight * et)[(0, 0)];
            vals.push(total);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - c).abs() <= 3.0 * se, "mc {mean} ± {se} vs {c}");
    }

    #[test]
    fn example_gain() {
        let sys = example_system();
        let lqr = lqr_synthesize(&sys).unwrap();
        assert!((lqr.gain[(0, 0)] + 0.28577569).abs() < 1e-6, "{}", lqr.gain);
        assert!((lqr.gain[(0, 1)] - 0.49102469).abs() < 1e-6, "{}", lqr.gain);
        assert!(dare_residual(&sys.a, &sys.b, &sys.q, &sys.r, &lqr.terminal_weight) < 1e-10);
        assert!(is_schur(&lqr.closed_loop));
    }

    #[test]
    fn lyapunov_identity() {
        let a = dmatrix![0.5, 0.2; -0.1, 0.3];
        let m = dmatrix![2.0, 0.1; 0.1, 1.0];
        let x = lyapunov_solve(&a, &m).unwrap();
        assert!((a.transpose() * &x * &a + &m - &x).amax() < 1e-12);
        assert!(matches!(lyapunov_solve(&dmatrix![1.0], &dmatrix![1.0]), Err(Error::NotSchur(_))));
    }

    #[test]
    fn unstabilizable_pair() {
        // Unstable mode not reachable from the input.
        let a = dmatrix![2.0, 0.0; 0.0, 0.5];
        let b = dmatrix![0.0; 1.0];
        let q = DMatrix::identity(2, 2);
        assert!(solve_dare(&a, &b, &q, &dmatrix![1.0]).is_err());
    }

    #[test]
    fn validation() {
        let s = example_system();
        assert!(LtiSystem::new(s.a.clone(), s.b.clone(), s.bw.clone(), s.q.clone(), dmatrix![-1.0], 8).is_err());
        assert!(LtiSystem::new(s.a.clone(), dmatrix![1.0], s.bw.clone(), s.q.clone(), s.r.clone(), 8).is_err());
        assert!(LtiSystem::new(s.a.clone(), s.b.clone(), s.bw.clone(), s.q.clone(), s.r.clone(), 0).is_err());
    }

    #[test]
    fn error_propagation_matches_sum() {
        let sys = example_system();
        let lqr = lqr_synthesize(&sys).unwrap();
        let prop = ErrorPropagation::new(&lqr.closed_loop, &sys.bw, 4);
        let ws: Vec<DVector<f64>> = (0..4).map(|i| DVector::from_vec(vec![0.1 * i as f64, -0.05])).collect();
        let errs = prop.errors(&ws);
        // e_l = Σ_{i<l} A_cl^{l-1-i} B_w w_i.
        for l in 1..=4 {
            let mut direct = DVector::zeros(2);
            for (i, w) in ws.iter().enumerate().take(l) {
                direct += prop.map(l - 1 - i) * w;
            }
            assert!((&errs[l - 1] - direct).amax() < 1e-14);
            assert!((&errs[l - 1] - prop.error_at(l, &ws)).amax() < 1e-14);
        }
    }
}
