use multilevel_core::pwl::{
    build_penalization, interp_error_bound, measured_interp_error, ConvexProfile, Partition,
    PwlConvex,
};
use proptest::prelude::*;

/// Random convex interpolant: increasing points, increasing chords.
fn convex_pwl() -> impl Strategy<Value = PwlConvex> {
    (3usize..8).prop_flat_map(|n| {
        (
            -2.0f64..0.0,
            prop::collection::vec(0.05f64..1.0, n - 1),
            -3.0f64..0.0,
            prop::collection::vec(0.01f64..1.0, n - 1),
            -1.0f64..1.0,
        )
            .prop_map(|(start, gaps, first, rises, offset)| {
                let chords: Vec<f64> = rises
                    .iter()
                    .scan(first, |c, r| {
                        *c += r;
                        Some(*c)
                    })
                    .collect();
                let mut points = vec![start];
                let mut values = vec![offset];
                for (h, s) in gaps.iter().zip(&chords) {
                    points.push(points.last().unwrap() + h);
                    values.push(values.last().unwrap() + s * h);
                }
                PwlConvex::interpolate(&points, &values).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fenchel_young_holds_with_equality_on_the_graph(f in convex_pwl(), t in 0.0f64..1.0, x in -3.0f64..3.0) {
        let fc = f.conjugate().unwrap();
        let sd = f.subdifferential(x).unwrap();
        let v = sd.lower + t * (sd.upper - sd.lower);
        prop_assert!((f.value(x) + fc.value(v) - x * v).abs() <= 1e-10 * (1.0 + x.abs() * v.abs()));
        prop_assert!(fc.subdifferential(v).unwrap().contains(x, 1e-10));
    }

    #[test]
    fn fenchel_young_inequality(f in convex_pwl(), x in -3.0f64..3.0, v in -4.0f64..4.0) {
        let fc = f.conjugate().unwrap();
        prop_assert!(f.value(x) + fc.value(v) >= x * v - 1e-10);
    }

    #[test]
    fn max_form_matches_value(f in convex_pwl(), x in -4.0f64..4.0) {
        prop_assert!((f.max_form(x) - f.value(x)).abs() <= 1e-10 * (1.0 + f.value(x).abs()));
    }

    #[test]
    fn biconjugate_recovers_the_function(f in convex_pwl(), x in -4.0f64..4.0) {
        let ff = f.conjugate().unwrap().conjugate().unwrap();
        prop_assert!((ff.value(x) - f.value(x)).abs() <= 1e-9 * (1.0 + f.value(x).abs()));
    }

    #[test]
    fn prox_satisfies_its_optimality_condition(f in convex_pwl(), z in -4.0f64..4.0, lambda in 0.01f64..3.0) {
        let x = f.prox(z, lambda);
        let sd = f.subdifferential(x).unwrap();
        let g = (z - x) / lambda;
        prop_assert!(sd.contains(g, 1e-9 * (1.0 + g.abs())));
    }

    #[test]
    fn scaling_scales_slopes_exactly(f in convex_pwl(), beta in 0.1f64..10.0) {
        let g = f.scaled(beta).unwrap();
        prop_assert_eq!(g.slopes().len(), f.slopes().len());
        for (a, b) in f.slopes().iter().zip(g.slopes()) {
            prop_assert_eq!((beta * a).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn quadratic_interpolation_error_is_bounded(m in 2usize..40, half in 0.2f64..3.0) {
        let part = Partition::uniform(-half, half, m).unwrap();
        let profile = ConvexProfile::quadratic();
        let pwl = build_penalization(&profile, &part).unwrap();
        let bound = interp_error_bound(&profile, &part);
        let measured = measured_interp_error(&profile, &pwl, &part, 64);
        prop_assert!(measured <= bound.global * (1.0 + 1e-12));
        // Midpoint error of u² on a segment of width h is exactly h²/4.
        let h = part.max_spacing();
        prop_assert!((measured - h * h / 4.0).abs() <= 1e-12 * (1.0 + h * h));
    }
}

#[test]
fn interpolant_dominates_convex_profile() {
    let part = Partition::new(vec![-1.0, -0.3, 0.0, 0.4, 1.2]).unwrap();
    let profile = ConvexProfile::quadratic();
    let pwl = build_penalization(&profile, &part).unwrap();
    for j in 0..=1000 {
        let u = -1.0 + 2.2 * j as f64 / 1000.0;
        assert!(pwl.value(u) >= profile.value(u) - 1e-14);
    }
}
