//! Random strictly convex QPs checked against accelerated projected
//! gradient on the dual, `max_{λ ≥ 0} −½(f + Cᵀλ)ᵀH⁻¹(f + Cᵀλ) − dᵀλ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smpc_core::qp::{solve, QpStatus};

fn dual_projected_gradient(h: &DMatrix<f64>, f: &DVector<f64>, c: &DMatrix<f64>, d: &DVector<f64>) -> DVector<f64> {
    let hinv = h.clone().try_inverse().unwrap();
    let m = c * &hinv * c.transpose();
    let lipschitz = m.symmetric_eigenvalues().amax().max(1e-12);
    let grad = |l: &DVector<f64>| -(c * (&hinv * (f + c.transpose() * l))) - d;
    let mut lam = DVector::zeros(c.nrows());
    let mut y = lam.clone();
    let mut t = 1.0f64;
    for _ in 0..200_000 {
        let next = (&y + grad(&y) / lipschitz).map(|v| v.max(0.0));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &lam) * ((t - 1.0) / t_next);
        if (&next - &lam).amax() < 1e-14 {
            lam = next;
            break;
        }
        lam = next;
        t = t_next;
    }
    -(&hinv * (f + c.transpose() * lam))
}

#[test]
fn random_feasible_qps_match_projected_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let n = rng.random_range(1..=6);
        let rows = rng.random_range(1..=10);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &g * g.transpose() + DMatrix::identity(n, n) * 0.5;
        let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let c = DMatrix::from_fn(rows, n, |_, _| rng.random_range(-1.0..1.0));
        // Feasible by construction: a random point satisfies every row.
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let d = &c * &x0 + DVector::from_fn(rows, |_, _| rng.random_range(0.0..0.5));
        let r = solve(&h, &f, &c, &d).unwrap();
        assert_eq!(r.status, QpStatus::Optimal, "case {case}");
        assert!(r.kkt_residual <= 1e-8, "case {case}: {}", r.kkt_residual);
        let oracle = dual_projected_gradient(&h, &f, &c, &d);
        let value = |x: &DVector<f64>| 0.5 * x.dot(&(&h * x)) + f.dot(x);
        assert!((r.value - value(&oracle)).abs() <= 1e-6 * (1.0 + r.value.abs()), "case {case}: {} vs {}", r.value, value(&oracle));
    }
}
