use carrier_core::probe::{
    generate_linear_interpolation, generate_local_perturbation, generate_surface_based, project_to_surface, ProjectionSettings,
    SurfaceGenerationConfig,
};
use carrier_core::reduce::ReducedSpace;
use carrier_core::surface::{basis_size, build_basis, ImplicitPolyModel, MonomialBasis};
use carrier_core::validity::{coefficient_consistency, neighborhood_consistency, surface_consistency};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn binomial(n: u128, k: u128) -> u128 {
    (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
}

fn coeffs(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, len).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn points(n: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n * d).prop_map(move |v| DMatrix::from_row_slice(n, d, &v))
}

/// An ellipse-like carrier in two variables, so Newton has a level set to find.
fn ellipse(a: f64, b: f64) -> ImplicitPolyModel {
    // basis order follows `exponents()`; map each monomial explicitly
    let basis = MonomialBasis::new(2, 2).unwrap();
    let theta = DVector::from_iterator(
        basis.len(),
        basis.exponents().iter().map(|e| match (e[0], e[1]) {
            (0, 0) => -1.0,
            (2, 0) => 1.0 / (a * a),
            (0, 2) => 1.0 / (b * b),
            _ => 0.0,
        }),
    );
    ImplicitPolyModel::new(basis, theta).unwrap()
}

fn ring(n: usize, a: f64, b: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, 2, |i, j| {
        let t = i as f64 / n as f64 * std::f64::consts::TAU;
        if j == 0 { a * t.cos() } else { b * t.sin() }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_size_is_a_binomial(r in 1usize..40, n in 1u32..5) {
        prop_assert_eq!(basis_size(r, n), binomial((r as u128) + n as u128, n as u128));
    }

    #[test]
    fn built_basis_matches_its_size(r in 1usize..8, n in 1u32..4) {
        let b = build_basis(r, n).unwrap();
        prop_assert_eq!(b.len() as u128, basis_size(r, n));
        let mut e = b.exponents();
        e.dedup();
        prop_assert_eq!(e.len(), b.len());
    }

    #[test]
    fn coefficient_consistency_is_a_sign_free_distance(t in coeffs(10), u in coeffs(10), c in 0.1f64..10.0) {
        let neg: Vec<f64> = t.iter().map(|x| -c * x).collect();
        prop_assert!(coefficient_consistency(&t, &neg).unwrap() < 1e-12);
        let tu = coefficient_consistency(&t, &u).unwrap();
        prop_assert_eq!(tu, coefficient_consistency(&u, &t).unwrap());
        prop_assert!((0.0..=2.0f64.sqrt() + 1e-12).contains(&tu));
    }

    #[test]
    fn surface_consistency_ignores_coefficient_scale(t in coeffs(6), c in -10.0f64..10.0, pts in points(20, 2)) {
        prop_assume!(c.abs() > 1e-2);
        let basis = MonomialBasis::new(2, 2).unwrap();
        let m1 = ImplicitPolyModel::new(basis.clone(), DVector::from_vec(t.clone())).unwrap();
        let m2 = ImplicitPolyModel::new(basis, DVector::from_vec(t.iter().map(|x| c * x).collect())).unwrap();
        let s1 = surface_consistency(&m1, &pts, 1.0, 1e-12).unwrap();
        let s2 = surface_consistency(&m2, &pts, 1.0, 1e-12).unwrap();
        prop_assert!((s1 - s2).abs() <= 1e-9 * s1.max(1.0));
    }

    #[test]
    fn neighborhood_consistency_survives_rigid_motion(
        orig in points(30, 3),
        synth in points(12, 3),
        rot in proptest::collection::vec(-1.0f64..1.0, 9),
        shift in proptest::collection::vec(-5.0f64..5.0, 3),
    ) {
        let q = DMatrix::from_row_slice(3, 3, &rot).qr().q();
        let move_ = |m: &DMatrix<f64>| {
            let mut out = m * q.transpose();
            for mut row in out.row_iter_mut() {
                for (x, s) in row.iter_mut().zip(&shift) {
                    *x += s;
                }
            }
            out
        };
        let (nc, dev) = neighborhood_consistency(&orig, &synth, 5).unwrap();
        let (nc2, dev2) = neighborhood_consistency(&move_(&orig), &move_(&synth), 5).unwrap();
        // ties between equidistant neighbours may resolve differently after rounding
        prop_assert!((nc - nc2).abs() <= 0.05, "{} vs {}", nc, nc2);
        prop_assert!((dev - dev2).abs() <= 1e-9 * dev.max(1.0));
    }

    #[test]
    fn pca_round_trips_points_in_its_span(
        basis in proptest::collection::vec(-1.0f64..1.0, 2 * 6),
        coords in proptest::collection::vec(-3.0f64..3.0, 25 * 2),
        offset in proptest::collection::vec(-1.0f64..1.0, 6),
    ) {
        let frame = DMatrix::from_row_slice(2, 6, &basis);
        prop_assume!(frame.rank(1e-3) == 2);
        let mut x = DMatrix::from_row_slice(25, 2, &coords) * &frame;
        for mut row in x.row_iter_mut() {
            for (v, o) in row.iter_mut().zip(&offset) {
                *v += o;
            }
        }
        let space = ReducedSpace::fit(&x, 0.999_999).unwrap();
        let z = space.project(&x).unwrap();
        let back = space.reconstruct(&z).unwrap();
        prop_assert!((&back - &x).abs().max() < 1e-9);
        prop_assert!((space.project(&back).unwrap() - z).abs().max() < 1e-9);
    }

    #[test]
    fn newton_steps_respect_the_cap(
        a in 0.5f64..2.0,
        b in 0.5f64..2.0,
        start in proptest::collection::vec(-4.0f64..4.0, 2),
        cap in 0.05f64..1.0,
    ) {
        prop_assume!(start.iter().any(|x| x.abs() > 0.1));
        let settings = ProjectionSettings { max_step: Some(cap), max_iter: 500, ..ProjectionSettings::default() };
        let (_, d) = project_to_surface(&ellipse(a, b), &start, &settings).unwrap();
        prop_assert!(d.longest_step <= cap * (1.0 + 1e-12));
    }

    #[test]
    fn generators_are_pure_in_their_seed(seed in any::<u64>(), a in 0.5f64..2.0) {
        let pts = ring(40, a, 1.0);
        let model = ellipse(a, 1.0);
        let cfg = SurfaceGenerationConfig::default();
        let s1 = generate_surface_based(&pts, &model, 30, &cfg, seed).unwrap();
        let s2 = generate_surface_based(&pts, &model, 30, &cfg, seed).unwrap();
        prop_assert_eq!(&s1.points, &s2.points);
        let l1 = generate_linear_interpolation(&pts, 30, seed, None).unwrap();
        prop_assert_eq!(&l1.points, &generate_linear_interpolation(&pts, 30, seed, None).unwrap().points);
        let p1 = generate_local_perturbation(&pts, 30, 0.5, seed).unwrap();
        prop_assert_eq!(&p1.points, &generate_local_perturbation(&pts, 30, 0.5, seed).unwrap().points);
    }

    #[test]
    fn converged_surface_points_sit_within_ten_tolerances(seed in any::<u64>(), a in 0.5f64..2.0, b in 0.5f64..2.0) {
        let cfg = SurfaceGenerationConfig::default();
        let batch = generate_surface_based(&ring(60, a, b), &ellipse(a, b), 50, &cfg, seed).unwrap();
        for d in batch.diagnostics.iter().filter(|d| d.converged) {
            prop_assert!(d.normalized_residual.unwrap() <= 10.0 * cfg.settings.f_tol);
        }
    }
}
