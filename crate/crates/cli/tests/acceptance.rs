//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p kalman-atomsense --test acceptance`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use atomsense::config::ExperimentConfig;
use atomsense::experiments::{self, calibrate, experiment_ou, experiment_unknown, LAB_REFERENCE};
use atomsense_core::filter::{run_filter_with_prior, GaussianBelief, Observation, Stage};
use atomsense_core::linear_model::LinearModel;
use atomsense_core::riccati::{
    solve_care, solve_dare, steady_state, CareOptions, DareMethod, DareOptions,
};
use atomsense_core::sensor::{build_model, waveform_estimate, Frame, ModelVariant, SensorParams};
use atomsense_core::simulator::{simulate, WaveformKind, WaveformSpec};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn lab_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("lab.toml");
    ExperimentConfig::load(&path).expect("lab.toml parses")
}

fn ou_params(cfg: &ExperimentConfig) -> SensorParams {
    experiments::filter_model(cfg).expect("model").1
}

fn doubling() -> DareOptions {
    DareOptions {
        method: DareMethod::Doubling,
        ..Default::default()
    }
}

fn scalar_dare() -> Outcome {
    let one = DMatrix::from_element(1, 1, 1.0);
    let ss = solve_dare(&one, &one, &one, &one, &DareOptions::default()).unwrap();
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let (ep, eu) = (
        (ss.sigma_pred[(0, 0)] - phi).abs(),
        (ss.sigma_upd[(0, 0)] - (phi - 1.0)).abs(),
    );
    outcome(
        ep < 1e-9 && eu < 1e-9,
        format!(
            "sigma_pred={:.10} sigma_upd={:.10} (errors {ep:.1e}, {eu:.1e})",
            ss.sigma_pred[(0, 0)],
            ss.sigma_upd[(0, 0)]
        ),
    )
}

fn filter_riccati_closure(cfg: &ExperimentConfig) -> Outcome {
    let params = ou_params(cfg);
    let model = build_model(&params, ModelVariant::RotatingFrame).unwrap();
    let ss = steady_state(&model, &doubling()).unwrap();
    let tr = experiments::simulate_from_config(cfg, cfg.run.seed).unwrap();
    let run = experiments::filter_trajectory(&model, &tr).unwrap();
    let last = &run.steps.last().unwrap().belief.cov;
    let rel = (last - &ss.sigma_upd).norm() / ss.sigma_upd.norm();
    outcome(
        rel < 1e-6,
        format!("‖Σ_(3000) − Σ_ss‖/‖Σ_ss‖ = {rel:.2e} after {} updates", run.steps.len() + 1),
    )
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

/// Filter posteriors against conditioning of the stacked joint Gaussian of
/// states and observations, with `Φ` and `Q^Δ` from nalgebra's exponential.
fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=n.min(3));
        let steps = 5;
        let delta = rng.random_range(0.05..0.5);
        let f = DMatrix::from_fn(n, n, |_, _| 0.7 * rng.sample::<f64, _>(StandardNormal))
            - DMatrix::identity(n, n) * 0.5;
        let q = random_spd(&mut rng, n, 0.05);
        let h = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = random_spd(&mut rng, m, 0.2);
        let m0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p0 = random_spd(&mut rng, n, 0.1);
        let zs: Vec<DVector<f64>> = (0..steps)
            .map(|_| DVector::from_fn(m, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal)))
            .collect();

        let model = LinearModel::new(f.clone(), q.clone(), h.clone(), r.clone(), delta).unwrap();
        let prior = GaussianBelief {
            mean: m0.clone(),
            cov: p0.clone(),
            t: 0.0,
            stage: Stage::Predicted,
        };
        let obs: Vec<Observation> = zs
            .iter()
            .enumerate()
            .map(|(k, z)| Observation {
                t: k as f64 * delta,
                z: z.clone(),
            })
            .collect();
        let run = run_filter_with_prior(&model, prior, &obs).unwrap();

        let mut big = DMatrix::zeros(2 * n, 2 * n);
        big.view_mut((0, 0), (n, n)).copy_from(&(&f * delta));
        big.view_mut((0, n), (n, n)).copy_from(&(&q * delta));
        big.view_mut((n, n), (n, n)).copy_from(&(-f.transpose() * delta));
        let e = big.exp();
        let phi = e.view((0, 0), (n, n)).into_owned();
        let qd = e.view((0, n), (n, n)) * phi.transpose();
        let qd = (&qd + qd.transpose()) * 0.5;

        let mut mu = vec![m0];
        let mut cov_kk = vec![p0];
        for k in 1..steps {
            mu.push(&phi * &mu[k - 1]);
            cov_kk.push(&phi * &cov_kk[k - 1] * phi.transpose() + &qd);
        }
        // Cov(x_i, x_j) for i ≥ j is Φ^{i−j} Cov(x_j, x_j).
        let cross = |i: usize, j: usize| -> DMatrix<f64> {
            let (a, b) = if i >= j { (i, j) } else { (j, i) };
            let mut c = cov_kk[b].clone();
            for _ in b..a {
                c = &phi * c;
            }
            if i >= j {
                c
            } else {
                c.transpose()
            }
        };
        for k in 0..steps {
            let nz = m * (k + 1);
            let mut szz = DMatrix::zeros(nz, nz);
            let mut sxz = DMatrix::zeros(n, nz);
            let mut innov = DVector::zeros(nz);
            for i in 0..=k {
                sxz.view_mut((0, i * m), (n, m)).copy_from(&(cross(k, i) * h.transpose()));
                innov.rows_mut(i * m, m).copy_from(&(&zs[i] - &h * &mu[i]));
                for j in 0..=k {
                    let mut blk = &h * cross(i, j) * h.transpose();
                    if i == j {
                        blk += &r;
                    }
                    szz.view_mut((i * m, j * m), (m, m)).copy_from(&blk);
                }
            }
            let inv = szz.cholesky().expect("joint covariance is SPD").inverse();
            let mean = &mu[k] + &sxz * &inv * innov;
            let cov = &cov_kk[k] - &sxz * &inv * sxz.transpose();
            let got = &run.steps[k].belief;
            worst = worst
                .max((&got.mean - mean).amax())
                .max((&got.cov - cov).amax());
        }
    }
    outcome(worst <= 1e-10, format!("max elementwise deviation over 100 models = {worst:.2e}"))
}

fn consistency_coverage(cfg: &ExperimentConfig) -> Outcome {
    let out = experiment_ou(cfg).unwrap();
    let r = &out.report;
    let [lo, hi] = cfg.thresholds.coverage;
    let ok_seeds = r.seeds.iter().all(|s| {
        (lo..=hi).contains(&s.coverage_waveform) && (lo..=hi).contains(&s.coverage_innovation)
    });
    let [nlo, nhi] = cfg.thresholds.nis_mean;
    let ok_nis = (nlo..=nhi).contains(&r.pooled_nis_mean);
    let span = |f: &dyn Fn(&experiments::OuSeedResult) -> f64| {
        let v: Vec<f64> = r.seeds.iter().map(f).collect();
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        format!("[{min:.4}, {max:.4}]")
    };
    outcome(
        ok_seeds && ok_nis,
        format!(
            "after {} transient samples: waveform {} innovation {} NIS {:.4}; whole run: waveform {} innovation {} NIS {:.4}",
            r.transient_samples,
            span(&|s| s.coverage_waveform),
            span(&|s| s.coverage_innovation),
            r.pooled_nis_mean,
            span(&|s| s.coverage_waveform_all),
            span(&|s| s.coverage_innovation_all),
            r.pooled_nis_mean_all,
        ),
    )
}

fn innovation_variance(cfg: &ExperimentConfig) -> Outcome {
    let out = experiment_ou(cfg).unwrap();
    let r = &out.report;
    let rel = (r.innovation_variance / r.s_ss - 1.0).abs();
    outcome(
        rel < 0.05,
        format!(
            "pooled variance of final 2000 innovations ({} runs) = {:.4e}, S_ss = {:.4e}, rel err {rel:.4}",
            r.seeds.len(),
            r.innovation_variance,
            r.s_ss
        ),
    )
}

fn care_dare(cfg: &ExperimentConfig) -> Outcome {
    let params = ou_params(cfg);
    let model = build_model(&params, ModelVariant::RotatingFrame).unwrap();
    let r = DMatrix::from_element(1, 1, params.r);
    let care = solve_care(&model.f_at(0.0), model.h(), model.process_noise(), &r, &CareOptions::default())
        .unwrap();
    let err = |delta: f64| {
        let p = SensorParams { delta, ..params };
        let m = build_model(&p, ModelVariant::RotatingFrame).unwrap();
        let ss = steady_state(&m, &doubling()).unwrap();
        (&ss.sigma_upd - &care.sigma).norm() / care.sigma.norm()
    };
    let (e6, e7) = (err(1e-6), err(1e-7));
    let ratio = e6 / e7;
    outcome(
        (8.0..=12.0).contains(&ratio),
        format!("rel error Δ=1e-6: {e6:.3e}, Δ=1e-7: {e7:.3e}, ratio {ratio:.3}"),
    )
}

fn table_ordering(cfg: &ExperimentConfig) -> Outcome {
    let out = experiment_unknown(cfg).unwrap();
    let (wp, pm) = (&out.report.wiener_process, &out.report.polynomial);
    let ok = pm.mse < wp.mse && pm.bias_sq < wp.bias_sq && pm.variance > wp.variance;
    let lab = &LAB_REFERENCE;
    outcome(
        ok,
        format!(
            "WP bias²={:.3e} var={:.3e} mse={:.3e} | PM bias²={:.3e} var={:.3e} mse={:.3e} | lab context WP mse={:.2e}, PM mse={:.2e}",
            wp.bias_sq, wp.variance, wp.mse, pm.bias_sq, pm.variance, pm.mse, lab[0].mse, lab[1].mse
        ),
    )
}

fn frame_equivalence(cfg: &ExperimentConfig) -> Outcome {
    let params = ou_params(cfg);
    let tr = experiments::simulate_from_config(cfg, cfg.run.seed).unwrap();
    let lab = build_model(&params, ModelVariant::KnownOu)
        .unwrap()
        .with_time_ordering(8, Default::default())
        .unwrap();
    let rf = build_model(&params, ModelVariant::RotatingFrame).unwrap();
    let run_lab = experiments::filter_trajectory(&lab, &tr).unwrap();
    let run_rf = experiments::filter_trajectory(&rf, &tr).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in run_lab.steps.iter().zip(&run_rf.steps) {
        let (ea, _) = waveform_estimate(&a.belief, &params, Frame::Lab, a.belief.t).unwrap();
        let (eb, _) = waveform_estimate(&b.belief, &params, Frame::Rotating, b.belief.t).unwrap();
        num += (ea - eb) * (ea - eb);
        den += eb * eb;
    }
    let rel = (num / den).sqrt();
    outcome(rel < 1e-8, format!("relative RMS difference of Ê = {rel:.2e}"))
}

fn calibration_loop(cfg: &ExperimentConfig) -> Outcome {
    let out = calibrate(cfg).unwrap();
    let r = &out.report;
    let nis = r.nis_mean.unwrap();
    let ok = r.linewidth_rel_err.abs() < 0.10 && r.ratio_rel_err.abs() < 0.10 && (0.85..=1.15).contains(&nis);
    outcome(
        ok,
        format!(
            "linewidth {:.1} Hz ({:+.2}%), S_ph/S_at {:.4} ({:+.2}%), rebuilt-filter NIS {nis:.4}",
            r.fit.linewidth_hz,
            100.0 * r.linewidth_rel_err,
            r.ratio_ph_at,
            100.0 * r.ratio_rel_err
        ),
    )
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

fn moment_checks(cfg: &ExperimentConfig) -> Outcome {
    const N: usize = 100_000;
    let base = cfg.sensor.params().unwrap();
    let (kappa, q_rate) = (100.0, 200.0);
    let ou = WaveformSpec {
        kind: WaveformKind::Ou { kappa },
        additive_noise_rate: q_rate,
    };

    // Stationary OU variance, sampled every 10 ms so the record spans many
    // correlation times.
    let coarse = SensorParams {
        delta: 1e-2,
        g_p: 0.0,
        ..base
    };
    let tr = simulate(&coarse, &ou, N, 101).unwrap();
    let target = q_rate / (2.0 * kappa);
    let vq = sample_variance(&tr.states.iter().map(|s| s[2]).collect::<Vec<_>>());
    let vp = sample_variance(&tr.states.iter().map(|s| s[3]).collect::<Vec<_>>());
    let ou_err = (vq / target - 1.0).abs().max((vp / target - 1.0).abs());

    // Observation noise at the lab sampling rate.
    let fine = SensorParams { g_p: 0.0, ..base };
    let tr = simulate(&fine, &ou, N, 102).unwrap();
    let resid: Vec<f64> = tr
        .observations
        .iter()
        .zip(&tr.states)
        .map(|(z, s)| z - fine.g_d * s[1])
        .collect();
    let obs_err = (sample_variance(&resid) / fine.r_delta() - 1.0).abs();

    // One-step residuals against the lab-frame discretisation.
    let model = build_model(
        &SensorParams {
            q_q: q_rate,
            q_p: q_rate,
            kappa_q: kappa,
            kappa_p: kappa,
            ..fine
        },
        ModelVariant::KnownOu,
    )
    .unwrap();
    let prop = model.propagator(0.0, fine.delta).unwrap();
    let mut acc = DMatrix::<f64>::zeros(4, 4);
    for k in 1..tr.len() {
        let x = DVector::from_column_slice(&tr.states[k]);
        let xp = DVector::from_column_slice(&tr.states[k - 1]);
        let w = x - &prop.phi * xp;
        acc += &w * w.transpose();
    }
    acc /= (tr.len() - 1) as f64;
    let qd = &prop.q_delta;
    let mut res_err = 0.0_f64;
    for i in 0..4 {
        for j in 0..4 {
            let scale = (qd[(i, i)] * qd[(j, j)]).sqrt();
            res_err = res_err.max((acc[(i, j)] - qd[(i, j)]).abs() / scale);
        }
    }
    outcome(
        ou_err < 0.05 && obs_err < 0.02 && res_err < 0.05,
        format!(
            "OU variance rel err {ou_err:.4}, observation-noise rel err {obs_err:.4}, one-step residual covariance max err {res_err:.4} (×√(Q_ii Q_jj))"
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; listing mode must not run the suite.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let cfg = lab_config();
    type Criterion<'a> = (&'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("1 scalar DARE closed form", Duration::from_millis(1), Box::new(scalar_dare)),
        ("2 filter-Riccati closure", Duration::from_secs(1), Box::new(|| filter_riccati_closure(&cfg))),
        ("3 joint-Gaussian oracle", Duration::from_secs(5), Box::new(oracle_equivalence)),
        ("4 consistency coverage", Duration::from_secs(10), Box::new(|| consistency_coverage(&cfg))),
        ("5 steady-state innovation variance", Duration::from_secs(1), Box::new(|| innovation_variance(&cfg))),
        ("6 CARE-DARE consistency", Duration::from_secs(10), Box::new(|| care_dare(&cfg))),
        ("7 WP vs PM ordering", Duration::from_secs(30), Box::new(|| table_ordering(&cfg))),
        ("8 frame equivalence", Duration::from_secs(5), Box::new(|| frame_equivalence(&cfg))),
        ("9 calibration loop", Duration::from_secs(60), Box::new(|| calibration_loop(&cfg))),
        ("10 SDE moment checks", Duration::from_secs(30), Box::new(|| moment_checks(&cfg))),
    ];
    let mut failures = 0;
    for (name, budget, run) in &criteria {
        let t0 = Instant::now();
        let out = run();
        let elapsed = t0.elapsed();
        let in_time = elapsed <= *budget;
        let ok = out.passed && in_time;
        if !ok {
            failures += 1;
        }
        println!(
            "{} #{name}: {} [{:.3} s, budget {:.3} s{}]",
            if ok { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
