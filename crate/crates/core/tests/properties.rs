use atomsense_core::filter::{predict, update, GaussianBelief, Stage};
use atomsense_core::linalg::{expm, min_eigenvalue};
use atomsense_core::riccati::{dare_residual, solve_dare, DareMethod, DareOptions};
use atomsense_core::sensor::{to_rotating_frame, Direction};
use atomsense_core::simulator::replicate;
use atomsense_core::validation::{coverage_test, true_error_stats};
use atomsense_core::LinearModel;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(n: usize, m: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v) * scale)
}

fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n, n, 1.0).prop_map(move |a| &a * a.transpose() + DMatrix::identity(n, n) * 0.1)
}

/// Stable drift: random matrix shifted left of its 1-norm.
fn stable(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n, n, 2.0).prop_map(move |a| {
        let shift = a.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
        a - DMatrix::identity(n, n) * (shift + 0.5)
    })
}

fn model(n: usize) -> impl Strategy<Value = LinearModel> {
    (stable(n), spd(n), matrix(1, n, 1.0), 0.05..2.0f64, 0.01..0.5f64).prop_map(
        move |(f, q, h, r, delta)| {
            let h = if h.amax() < 1e-3 { DMatrix::from_element(1, n, 1.0) } else { h };
            LinearModel::new(f, q, h, DMatrix::from_element(1, 1, r), delta).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn update_never_increases_covariance(m in model(3), cov in spd(3), mean in matrix(3, 1, 1.0), z in -2.0..2.0f64) {
        let prior = GaussianBelief {
            mean: mean.column(0).into_owned(),
            cov: cov.clone(),
            t: 0.0,
            stage: Stage::Predicted,
        };
        let (post, diag) = update(&prior, &m, &DVector::from_element(1, z)).unwrap();
        let shrink = &cov - &post.cov;
        prop_assert!(min_eigenvalue(&shrink) >= -1e-10 * cov.norm());
        prop_assert!(min_eigenvalue(&post.cov) > 0.0);
        prop_assert!(diag.nis >= 0.0);
    }

    #[test]
    fn predict_keeps_covariance_psd(m in model(3), cov in spd(3)) {
        let prior = GaussianBelief {
            mean: DVector::zeros(3),
            cov,
            t: 0.0,
            stage: Stage::Updated,
        };
        let prop = m.propagator(0.0, m.delta()).unwrap();
        let next = predict(&prior, &prop).unwrap();
        prop_assert!(min_eigenvalue(&next.cov) >= -1e-12 * next.cov.norm());
        prop_assert_eq!(next.stage, Stage::Predicted);
    }

    #[test]
    fn frame_round_trip(v in prop::collection::vec(-10.0..10.0f64, 4), t in 0.0..1.0f64, w in 0.0..1e5f64) {
        let x = DVector::from_vec(v);
        let there = to_rotating_frame(&x, t, w, Direction::ToRotating).unwrap();
        let back = to_rotating_frame(&there, t, w, Direction::ToLab).unwrap();
        prop_assert!((back - &x).amax() < 1e-12);
        prop_assert!((there.norm() - x.norm()).abs() < 1e-12);
    }

    #[test]
    fn expm_semigroup(a in matrix(4, 4, 1.5), s in 0.0..1.0f64, t in 0.0..1.0f64) {
        let lhs = expm(&(&a * (s + t))).unwrap();
        let rhs = expm(&(&a * s)).unwrap() * expm(&(&a * t)).unwrap();
        prop_assert!((&lhs - &rhs).amax() <= 1e-11 * lhs.amax().max(1.0));
    }

    #[test]
    fn dare_solutions_are_fixed_points(m in model(3)) {
        let prop = m.propagator(0.0, m.delta()).unwrap();
        for method in [DareMethod::FixedPoint, DareMethod::Doubling] {
            let opts = DareOptions { method, ..DareOptions::default() };
            let ss = solve_dare(&prop.phi, m.h(), &prop.q_delta, m.r_delta(), &opts).unwrap();
            let res = dare_residual(&ss.sigma_pred, &prop.phi, m.h(), &prop.q_delta, m.r_delta()).unwrap();
            prop_assert!(res < 1e-9, "residual {res}");
            prop_assert!(min_eigenvalue(&ss.sigma_upd) > 0.0);
        }
    }

    #[test]
    fn mse_decomposes(runs in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 20), 2..6), truth in prop::collection::vec(-5.0..5.0f64, 20)) {
        let views: Vec<&[f64]> = runs.iter().map(Vec::as_slice).collect();
        let curves = true_error_stats(&views, &truth).unwrap();
        let direct = runs
            .iter()
            .flat_map(|r| r.iter().zip(&truth).map(|(e, t)| (e - t) * (e - t)))
            .sum::<f64>()
            / (runs.len() * truth.len()) as f64;
        let r = curves.report;
        prop_assert!((r.bias_sq + r.variance - direct).abs() <= 1e-10 * direct.max(1.0));
        prop_assert!((r.mse - direct).abs() <= 1e-10 * direct.max(1.0));
    }

    #[test]
    fn coverage_is_a_fraction(errs in prop::collection::vec(-10.0..10.0f64, 1..200), level in 0.5..0.999f64) {
        let vars = vec![1.0; errs.len()];
        let c = coverage_test(&errs, &vars, level).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn replicate_seeds_are_distinct(runs in 1usize..64, base in any::<u64>()) {
        let seeds = replicate(runs, base).unwrap();
        prop_assert_eq!(seeds[0], base);
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), runs);
    }
}
