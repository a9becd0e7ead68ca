use multilevel_core::dual::{minimize, DualProblem, FunctionalKind, OptimizerSettings, Quadrature, SolveStatus};
use multilevel_core::extract::{
    extract_control, extract_control_resolving, level_sets, verify_staircase_per_channel,
};
use multilevel_core::fenchel::{duality_gap, nodewise_optimality, solve_primal, DiscretePrimal, PrimalSettings};
use multilevel_core::lti::{simulate_forward, LtiSystem};
use multilevel_core::pwl::{build_penalization, ConvexProfile, Partition, PwlConvex};
use multilevel_core::solvable::{gram_norm, solvable_bound};
use multilevel_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn penalization(segments: usize) -> PwlConvex {
    build_penalization(
        &ConvexProfile::quadratic(),
        &Partition::uniform(-1.0, 1.0, segments).unwrap(),
    )
    .unwrap()
}

fn oscillator(kind: FunctionalKind, horizon: f64, segments: usize, nodes: usize) -> DualProblem {
    let sys = LtiSystem::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DVector::from_vec(vec![-1.0, 0.5]),
        horizon,
    )
    .unwrap();
    DualProblem::new(
        sys,
        vec![penalization(segments)],
        kind,
        Quadrature::uniform(horizon, nodes).unwrap(),
        OptimizerSettings::default(),
    )
    .unwrap()
}

fn terminal(prob: &DualProblem, ctrl: &multilevel_core::extract::MultilevelControl) -> f64 {
    let h = prob.system().horizon();
    simulate_forward(prob.system(), ctrl, &[0.0, h]).unwrap().terminal().norm()
}

#[test]
fn fabre_control_is_a_staircase_that_steers_to_zero() {
    let prob = oscillator(FunctionalKind::JmlFabre, 0.5, 4, 4000);
    let r = minimize(&prob).unwrap();
    assert_eq!(r.status, SolveStatus::Converged);
    let ctrl = extract_control(&r.p_star, &prob).unwrap();
    let sets = level_sets(&prob, ctrl.scale);
    assert!(verify_staircase_per_channel(&ctrl, &sets).unwrap().valid);
    for ch in &ctrl.channels {
        assert!(ch.levels.iter().all(|l| l.is_finite() && sets[0].contains(l)));
        assert!(ch.switch_times.windows(2).all(|w| w[0] < w[1]));
    }
    assert!(terminal(&prob, &ctrl) <= 1e-2);
}

#[test]
fn flat_adjoint_is_resolved_into_a_bang_bang_staircase() {
    let prob = oscillator(FunctionalKind::Jml, 4.0, 4, 4000);
    let r = minimize(&prob).unwrap();
    assert_eq!(r.status, SolveStatus::Converged);
    assert!(matches!(
        extract_control(&r.p_star, &prob),
        Err(Error::DegenerateAdjoint { .. })
    ));
    let ctrl = extract_control_resolving(&r.p_star, &prob, 8).unwrap();
    assert_eq!(ctrl.distinct_levels(), vec![-0.5, 0.5]);
    assert!(verify_staircase_per_channel(&ctrl, &level_sets(&prob, 1.0)).unwrap().valid);
    assert!(terminal(&prob, &ctrl) <= 1e-10);
}

#[test]
fn primal_and_dual_close_the_gap_on_a_finer_partition() {
    let prob = oscillator(FunctionalKind::Jml, 4.0, 8, 1000);
    let r = minimize(&prob).unwrap();
    assert_eq!(r.status, SolveStatus::Converged);
    let dp = DiscretePrimal::new(&prob).unwrap();
    let sol = solve_primal(&dp, &PrimalSettings::default()).unwrap();
    assert!(sol.residual <= 1e-6);
    let gap = duality_gap(&sol, &r.p_star, &prob).unwrap();
    assert!(gap.gap.abs() <= 1e-3 * (1.0 + gap.primal.abs()));
    assert!(nodewise_optimality(&sol, &r.p_star, &prob, 1e-6).unwrap() >= 0.99);
}

#[test]
fn quadratic_kinds_have_no_discrete_primal() {
    let prob = oscillator(FunctionalKind::J2, 4.0, 4, 100);
    assert!(matches!(DiscretePrimal::new(&prob), Err(Error::Unsupported(_))));
}

#[test]
fn controllable_datum_lies_in_the_solvable_ball() {
    let prob = oscillator(FunctionalKind::Jml, 4.0, 4, 4000);
    let report = solvable_bound(prob.system(), &penalization(4)).unwrap();
    assert!(report.passes);
    assert!((report.gram_norm - 2.0).abs() <= 1e-8);
    assert!((report.sigma_bar - 1.5).abs() <= 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gram_norm_grows_with_the_horizon(a in prop::collection::vec(-1.0f64..1.0, 4), t in 0.1f64..3.0, dt in 0.01f64..1.0) {
        let a = DMatrix::from_vec(2, 2, a);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let g1 = gram_norm(&a, &b, t, 801).unwrap();
        let g2 = gram_norm(&a, &b, t + dt, 801).unwrap();
        prop_assert!(g2 >= g1 - 1e-12);
    }

    #[test]
    fn scalar_gram_norm_has_a_closed_form(a in -2.0f64..2.0, t in 0.1f64..3.0) {
        prop_assume!(a.abs() > 1e-3);
        let g = gram_norm(&DMatrix::from_element(1, 1, a), &DMatrix::from_element(1, 1, 1.0), t, 4001).unwrap();
        let exact = ((1.0 - (-2.0 * a * t).exp()) / (2.0 * a)).sqrt();
        prop_assert!((g - exact).abs() <= 1e-8 * (1.0 + exact));
    }
}
