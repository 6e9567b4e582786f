use approx::assert_relative_eq;
use atomsense_core::filter::{run_filter, Observation};
use atomsense_core::riccati::{solve_dare, steady_state, DareMethod, DareOptions};
use atomsense_core::sensor::{build_model, ModelVariant, SensorParams};
use atomsense_core::simulator::{simulate, WaveformKind, WaveformSpec};
use atomsense_core::validation::{normal_cdf, normal_quantile};
use atomsense_core::LinearModel;
use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

#[test]
fn scalar_random_walk_steady_state_is_golden_ratio() {
    let golden = 0.5 * (1.0 + 5f64.sqrt());
    for method in [DareMethod::FixedPoint, DareMethod::Doubling] {
        let opts = DareOptions { method, ..DareOptions::default() };
        let ss = solve_dare(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0), &opts).unwrap();
        assert_relative_eq!(ss.sigma_pred[(0, 0)], golden, max_relative = 1e-10);
        assert_relative_eq!(ss.gain[(0, 0)], golden / (golden + 1.0), max_relative = 1e-10);
        assert_relative_eq!(ss.sigma_upd[(0, 0)], golden - 1.0, max_relative = 1e-10);
    }
}

#[test]
fn filter_covariance_reaches_steady_state() {
    let m = LinearModel::new(scalar(-2.0), scalar(3.0), scalar(1.5), scalar(0.4), 0.1).unwrap();
    let ss = steady_state(&m, &DareOptions::default()).unwrap();
    let obs: Vec<_> = (0..200).map(|k| Observation::scalar(0.1 * k as f64, 0.0)).collect();
    let run = run_filter(&m, &obs).unwrap();
    let last = run.steps.last().unwrap();
    assert_relative_eq!(last.belief.cov[(0, 0)], ss.sigma_upd[(0, 0)], max_relative = 1e-10);
    assert_relative_eq!(
        last.diagnostics.innovation_cov[(0, 0)],
        ss.innov_cov[(0, 0)],
        max_relative = 1e-10
    );
}

#[test]
fn signal_free_spin_variance_matches_stationary_value() {
    let p = SensorParams::lab_defaults();
    let spec = WaveformSpec {
        kind: WaveformKind::Ou { kappa: 100.0 },
        additive_noise_rate: 0.0,
    };
    let tr = simulate(&p, &spec, 400_000, 3).unwrap();
    let mean_sq = tr.states.iter().map(|s| s[0] * s[0] + s[1] * s[1]).sum::<f64>() / (2 * tr.len()) as f64;
    assert_relative_eq!(mean_sq, p.q_z * p.t2 / 2.0, max_relative = 0.1);
    assert!(tr.waveform.iter().all(|e| *e == 0.0));
}

#[test]
fn known_ou_model_filters_simulated_data() {
    let p = SensorParams {
        g_p: 4e12,
        q_q: 200.0,
        q_p: 200.0,
        kappa_q: 100.0,
        kappa_p: 100.0,
        ..SensorParams::lab_defaults()
    };
    let spec = WaveformSpec {
        kind: WaveformKind::Ou { kappa: 100.0 },
        additive_noise_rate: 200.0,
    };
    let tr = simulate(&p, &spec, 4000, 5).unwrap();
    let m = build_model(&p, ModelVariant::KnownOu).unwrap();
    let obs: Vec<_> = tr
        .times
        .iter()
        .zip(&tr.observations)
        .map(|(t, z)| Observation::scalar(*t, *z))
        .collect();
    let run = run_filter(&m, &obs).unwrap();
    let tail = &run.steps[1000..];
    let nis = tail.iter().map(|s| s.diagnostics.nis).sum::<f64>() / tail.len() as f64;
    assert!((0.85..1.15).contains(&nis), "mean NIS {nis}");
}

#[test]
fn normal_helpers_match_reference_distribution() {
    let n = Normal::standard();
    for x in [-4.0, -1.5, -0.2, 0.0, 0.7, 1.96, 3.3] {
        assert_relative_eq!(normal_cdf(x), n.cdf(x), max_relative = 1e-7);
    }
    for p in [1e-6, 0.025, 0.3, 0.5, 0.9, 0.975, 0.999_999] {
        assert_relative_eq!(normal_quantile(p).unwrap(), n.inverse_cdf(p), max_relative = 1e-8);
    }
    assert!(normal_quantile(0.0).is_err());
}
