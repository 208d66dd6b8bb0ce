//! Properties of the online problem on the two-state converter model:
//! optimal plans satisfy every row, the feasible region is robustly
//! invariant under the closed loop and, for the tube scheme, the shifted
//! plan stays feasible for every disturbance in `W`.

use std::sync::OnceLock;

use nalgebra::DVector;
use proptest::prelude::*;
use smpc_core::controller::Controller;
use smpc_core::design::{design, Design, ProblemConfig, Scheme};
use smpc_core::qp::QpStatus;

const REGION: &str = include_str!("../../../configs/region.json");

struct Case {
    design: Design,
    controller: Controller,
    w_vertices: Vec<DVector<f64>>,
}

fn build(scheme: Scheme, eps_f: Option<f64>) -> Case {
    let cfg = ProblemConfig::from_json(REGION).unwrap().with_scheme(scheme, eps_f);
    let design = design(&cfg).unwrap();
    let controller = design.controller(&cfg).unwrap();
    let w_vertices = cfg.disturbance_model().unwrap().support().vertices().unwrap();
    Case {
        design,
        controller,
        w_vertices,
    }
}

fn case(scheme: Scheme, eps_f: Option<f64>) -> &'static Case {
    static PROPOSED: OnceLock<Case> = OnceLock::new();
    static MIXED: OnceLock<Case> = OnceLock::new();
    static TUBE: OnceLock<Case> = OnceLock::new();
    static ROBUST: OnceLock<Case> = OnceLock::new();
    let cell = match (scheme, eps_f) {
        (Scheme::Proposed, None) => &PROPOSED,
        (Scheme::Proposed, Some(_)) => &MIXED,
        (Scheme::Tube, _) => &TUBE,
        _ => &ROBUST,
    };
    cell.get_or_init(|| build(scheme, eps_f))
}

/// Point of the region's bounding box at relative coordinates `t`.
fn in_box(c: &Case, t: &[f64]) -> DVector<f64> {
    let (lo, hi) = c.design.region().bounding_box().unwrap();
    DVector::from_fn(lo.len(), |i, _| lo[i] + (hi[i] - lo[i]) * t[i])
}

/// Convex combination of the vertices of `W`.
fn in_w(c: &Case, weights: &[f64]) -> DVector<f64> {
    let total: f64 = weights.iter().take(c.w_vertices.len()).sum::<f64>().max(1e-12);
    c.w_vertices
        .iter()
        .zip(weights)
        .fold(DVector::zeros(c.w_vertices[0].len()), |acc, (v, &a)| acc + v * (a / total))
}

fn successor_stays_feasible(c: &Case, x: &DVector<f64>, w: &DVector<f64>) -> Result<(), TestCaseError> {
    let mut ctrl = c.controller.clone();
    let (u, sol) = ctrl.mpc_step(x).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(sol.status, QpStatus::Optimal);
    prop_assert!(u.amax() <= 0.2 + 1e-7);
    let sys = ctrl.system();
    let next = sys.step(x, &u, w);
    prop_assert!(c.design.region().contains_point(&next, 1e-7), "successor {next} left the region");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn optimal_plans_satisfy_their_rows(t in prop::array::uniform2(0.0f64..1.0)) {
        let c = case(Scheme::Proposed, None);
        let x = in_box(c, &t);
        prop_assume!(c.design.region().contains_point(&x, 0.0));
        let sol = c.controller.solve(&x).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(sol.value >= -1e-9);
        prop_assert!(c.controller.check_plan(&x, &sol.v_star));
        if let Some(first) = &c.controller.sets().first_step {
            prop_assert!(first.contains_point(&sol.z_star[1], 1e-7));
        }
        prop_assert!(c.controller.sets().terminal.contains_point(sol.z_star.last().unwrap(), 1e-7));
    }

    #[test]
    fn proposed_region_is_robustly_invariant(t in prop::array::uniform2(0.0f64..1.0), w in prop::collection::vec(0.0f64..1.0, 16)) {
        let c = case(Scheme::Proposed, None);
        let x = in_box(c, &t);
        prop_assume!(c.design.region().contains_point(&x, 0.0));
        successor_stays_feasible(c, &x, &in_w(c, &w))?;
    }

    #[test]
    fn mixed_region_is_robustly_invariant(t in prop::array::uniform2(0.0f64..1.0), w in prop::collection::vec(0.0f64..1.0, 16)) {
        let c = case(Scheme::Proposed, Some(0.2));
        let x = in_box(c, &t);
        prop_assume!(c.design.region().contains_point(&x, 0.0));
        successor_stays_feasible(c, &x, &in_w(c, &w))?;
    }

    #[test]
    fn robust_region_is_robustly_invariant(t in prop::array::uniform2(0.0f64..1.0), w in prop::collection::vec(0.0f64..1.0, 16)) {
        let c = case(Scheme::Robust, None);
        let x = in_box(c, &t);
        prop_assume!(c.design.region().contains_point(&x, 0.0));
        successor_stays_feasible(c, &x, &in_w(c, &w))?;
    }

    #[test]
    fn tube_candidate_is_feasible_for_every_disturbance(t in prop::array::uniform2(0.0f64..1.0), w in prop::collection::vec(0.0f64..1.0, 16)) {
        let c = case(Scheme::Tube, None);
        let x = in_box(c, &t);
        prop_assume!(c.design.region().contains_point(&x, 0.0));
        let mut ctrl = c.controller.clone();
        ctrl.mpc_step(&x).unwrap();
        let w = in_w(c, &w);
        let cand = ctrl.candidate_shift(&w).unwrap();
        prop_assert!(cand.feasible);
    }

    #[test]
    fn solving_is_deterministic(t in prop::array::uniform2(0.0f64..1.0)) {
        let c = case(Scheme::Proposed, None);
        let x = in_box(c, &t);
        prop_assume!(c.design.region().contains_point(&x, 0.0));
        let a = c.controller.solve(&x).unwrap();
        let b = c.controller.solve(&x).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        prop_assert_eq!(a.v_star, b.v_star);
    }
}
