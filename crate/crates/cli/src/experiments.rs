//! Experiment drivers behind the subcommands.

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use atomsense_core::filter::{run_filter, FilterRun, GaussianBelief, Observation};
use atomsense_core::linear_model::LinearModel;
use atomsense_core::riccati::{solve_dare, steady_state, DareMethod, DareOptions, SteadyState};
use atomsense_core::sensor::{
    build_model, quadrature_estimate, spin_noise_rates, waveform_estimate, Frame, ModelVariant,
    SensorParams,
};
use atomsense_core::simulator::{replicate, simulate, Trajectory, WaveformKind, WaveformSpec};
use atomsense_core::spectroscopy::{estimate_psd, fit_lorentzian, PsdEstimate, PsdFit};
use atomsense_core::validation::{
    coverage_test, true_error_stats, whiteness_test, ErrorReport,
};

use crate::config::{ExperimentConfig, VariantName};
use crate::io::{matrix_from_rows, matrix_rows, FilterRow, TrajectoryTable, SCHEMA_VERSION};

/// Caps the replicate worker count.
pub const THREADS_ENV: &str = "KALMAN_ATOMSENSE_THREADS";

pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be a positive integer");
        }
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

/// Runs `f` over the replicate seeds; results come back in seed order.
fn fan_out<T, F>(seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    worker_pool()?.install(|| seeds.par_iter().map(|s| f(*s)).collect())
}

/// A bounded statistic.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub low: f64,
    pub high: f64,
    pub passed: bool,
}

impl Check {
    pub fn within(name: impl Into<String>, value: f64, low: f64, high: f64) -> Self {
        Check {
            name: name.into(),
            value,
            low,
            high,
            passed: value >= low && value <= high,
        }
    }

    pub fn below(name: impl Into<String>, value: f64, high: f64) -> Self {
        Check::within(name, value, f64::NEG_INFINITY, high)
    }
}

fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

pub fn observations(times: &[f64], z: &[f64]) -> Vec<Observation> {
    times
        .iter()
        .zip(z)
        .map(|(t, z)| Observation::scalar(*t, *z))
        .collect()
}

pub fn filter_trajectory(model: &LinearModel, tr: &Trajectory) -> Result<FilterRun> {
    Ok(run_filter(model, &observations(&tr.times, &tr.observations))?)
}

/// One CSV row per observation; row 0 is the initialization.
pub fn filter_rows(run: &FilterRun, params: &SensorParams, frame: Frame) -> Result<Vec<FilterRow>> {
    let row = |b: &GaussianBelief, innov: f64, s: f64, nis: f64| -> Result<FilterRow> {
        let (e_hat, e_var) = waveform_estimate(b, params, frame, b.t)?;
        Ok(FilterRow {
            t: b.t,
            x_hat: b.mean.iter().copied().collect(),
            sigma: b.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
            innovation: innov,
            s,
            nis,
            e_hat,
            e_var,
        })
    };
    let mut rows = Vec::with_capacity(run.steps.len() + 1);
    rows.push(row(&run.initial, f64::NAN, f64::NAN, f64::NAN)?);
    for st in &run.steps {
        let d = &st.diagnostics;
        rows.push(row(&st.belief, d.innovation[0], d.innovation_cov[(0, 0)], d.nis)?);
    }
    Ok(rows)
}

/// Steady state in JSON form.
#[derive(Debug, Clone, Serialize)]
pub struct SteadyStateReport {
    pub schema_version: u32,
    pub sigma_pred: Vec<Vec<f64>>,
    pub sigma_upd: Vec<Vec<f64>>,
    pub gain: Vec<Vec<f64>>,
    pub innov_cov: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

impl From<&SteadyState> for SteadyStateReport {
    fn from(ss: &SteadyState) -> Self {
        SteadyStateReport {
            schema_version: SCHEMA_VERSION,
            sigma_pred: matrix_rows(&ss.sigma_pred),
            sigma_upd: matrix_rows(&ss.sigma_upd),
            gain: matrix_rows(&ss.gain),
            innov_cov: matrix_rows(&ss.innov_cov),
            iterations: ss.iterations,
            residual: ss.residual,
        }
    }
}

fn doubling() -> DareOptions {
    DareOptions {
        method: DareMethod::Doubling,
        ..Default::default()
    }
}

/// DARE for `[discrete]` when present, else for the configured sensor model.
pub fn steady_state_for(cfg: &ExperimentConfig) -> Result<SteadyState> {
    if let Some(d) = &cfg.discrete {
        let phi = matrix_from_rows(&d.phi).context("[discrete] phi")?;
        let h = matrix_from_rows(&d.h).context("[discrete] h")?;
        let q = matrix_from_rows(&d.q).context("[discrete] q")?;
        let r = matrix_from_rows(&d.r).context("[discrete] r")?;
        return Ok(solve_dare(&phi, &h, &q, &r, &DareOptions::default())?);
    }
    let (model, _, _) = filter_model(cfg)?;
    if !model.is_time_invariant() {
        bail!("steady state needs a time-invariant model; use the rotating frame");
    }
    Ok(steady_state(&model, &doubling())?)
}

/// Filter model, its parameters and its variant from `[model]`.
pub fn filter_model(cfg: &ExperimentConfig) -> Result<(LinearModel, SensorParams, ModelVariant)> {
    let sensor = cfg.sensor.params()?;
    let params = cfg.model.filter_params(&sensor, &cfg.waveform);
    let variant = cfg.model.variant();
    let model = build_model(&params, variant)?
        .with_time_ordering(cfg.model.substeps, cfg.model.time_ordering.into())?;
    Ok((model, params, variant))
}

/// Signal-generating parameters with `g_p` from `[sensor]`.
pub fn simulate_from_config(cfg: &ExperimentConfig, seed: u64) -> Result<Trajectory> {
    let sensor = cfg.sensor.params()?;
    Ok(simulate(&sensor, &cfg.waveform.spec()?, cfg.run.n_steps, seed)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct OuSeedResult {
    pub seed: u64,
    /// After the transient window.
    pub coverage_waveform: f64,
    pub coverage_innovation: f64,
    pub nis_mean: f64,
    /// Whole run.
    pub coverage_waveform_all: f64,
    pub coverage_innovation_all: f64,
    pub nis_mean_all: f64,
    pub mse_waveform: f64,
    /// `‖Σ_{n|n} − Σ_ss‖_F / ‖Σ_ss‖_F` at the last step; time-invariant models only.
    pub final_rel_cov: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OuReport {
    pub schema_version: u32,
    pub variant: VariantName,
    pub n_steps: usize,
    pub transient_samples: usize,
    pub seeds: Vec<OuSeedResult>,
    pub pooled_nis_mean: f64,
    pub pooled_nis_mean_all: f64,
    /// Pooled sample variance of the last `innovation_window` innovations of every run.
    pub innovation_variance: f64,
    pub s_ss: f64,
    pub steady_state: SteadyStateReport,
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub struct OuOutput {
    pub report: OuReport,
    pub trajectory: Trajectory,
    pub rows: Vec<FilterRow>,
}

struct OuRun {
    result: OuSeedResult,
    nis: Vec<f64>,
    tail_innov: Vec<f64>,
    trajectory: Trajectory,
    rows: Vec<FilterRow>,
}

fn frac_in(errors: &[f64], vars: &[f64]) -> Result<f64> {
    Ok(coverage_test(errors, vars, 0.95)?)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// OU validation: model-matched simulation and filtering over `n_runs`
/// replicate seeds.
pub fn experiment_ou(cfg: &ExperimentConfig) -> Result<OuOutput> {
    if !matches!(cfg.model.variant, VariantName::KnownOu | VariantName::RotatingFrame) {
        bail!("experiment-ou needs model.variant = known_ou or rotating_frame");
    }
    if !matches!(cfg.waveform.spec()?.kind, WaveformKind::Ou { .. }) {
        bail!("experiment-ou needs an OU waveform");
    }
    let (model, params, variant) = filter_model(cfg)?;
    let frame = variant.frame();
    let rf = build_model(&params, ModelVariant::RotatingFrame)?;
    let ss = steady_state(&rf, &doubling())?;
    let skip = cfg.transient_samples()?;
    let n = cfg.run.n_steps;
    if skip + 2 >= n {
        bail!("transient window leaves no samples");
    }
    let window = cfg.thresholds.innovation_window.min(n - 1);
    let seeds = replicate(cfg.run.n_runs, cfg.run.seed)?;

    let runs = fan_out(&seeds, |seed| {
        let tr = simulate_from_config(cfg, seed)?;
        let run = filter_trajectory(&model, &tr)?;
        let rows = filter_rows(&run, &params, frame)?;
        let mut err = Vec::with_capacity(n - 1);
        let mut var = Vec::with_capacity(n - 1);
        let mut inn = Vec::with_capacity(n - 1);
        let mut s = Vec::with_capacity(n - 1);
        let mut nis = Vec::with_capacity(n - 1);
        for (k, row) in rows.iter().enumerate().skip(1) {
            err.push(row.e_hat - tr.waveform[k]);
            var.push(row.e_var);
            inn.push(row.innovation);
            s.push(row.s);
            nis.push(row.nis);
        }
        let cut = skip.saturating_sub(1);
        let final_rel_cov = if model.is_time_invariant() {
            let last = &run.steps.last().unwrap().belief.cov;
            Some((last - &ss.sigma_upd).norm() / ss.sigma_upd.norm())
        } else {
            None
        };
        let result = OuSeedResult {
            seed,
            coverage_waveform: frac_in(&err[cut..], &var[cut..])?,
            coverage_innovation: frac_in(&inn[cut..], &s[cut..])?,
            nis_mean: mean(&nis[cut..]),
            coverage_waveform_all: frac_in(&err, &var)?,
            coverage_innovation_all: frac_in(&inn, &s)?,
            nis_mean_all: mean(&nis),
            mse_waveform: err[cut..].iter().map(|e| e * e).sum::<f64>() / (err.len() - cut) as f64,
            final_rel_cov,
        };
        let tail_innov = inn[inn.len() - window..].to_vec();
        Ok(OuRun {
            result,
            nis: nis[cut..].to_vec(),
            tail_innov,
            trajectory: tr,
            rows,
        })
    })?;

    let pooled_nis: Vec<f64> = runs.iter().flat_map(|r| r.nis.iter().copied()).collect();
    let pooled_nis_all = mean(&runs.iter().map(|r| r.result.nis_mean_all).collect::<Vec<_>>());
    let tail: Vec<f64> = runs.iter().flat_map(|r| r.tail_innov.iter().copied()).collect();
    let tm = mean(&tail);
    let innovation_variance =
        tail.iter().map(|v| (v - tm) * (v - tm)).sum::<f64>() / (tail.len() - 1) as f64;
    let s_ss = ss.innov_cov[(0, 0)];

    let th = &cfg.thresholds;
    let mut checks = Vec::new();
    for r in &runs {
        let s = &r.result;
        checks.push(Check::within(
            format!("coverage_waveform[seed={}]", s.seed),
            s.coverage_waveform,
            th.coverage[0],
            th.coverage[1],
        ));
        checks.push(Check::within(
            format!("coverage_innovation[seed={}]", s.seed),
            s.coverage_innovation,
            th.coverage[0],
            th.coverage[1],
        ));
    }
    let pooled_nis_mean = mean(&pooled_nis);
    checks.push(Check::within("pooled_nis_mean", pooled_nis_mean, th.nis_mean[0], th.nis_mean[1]));
    checks.push(Check::below(
        "innovation_variance_rel_err",
        (innovation_variance / s_ss - 1.0).abs(),
        th.innovation_variance,
    ));
    for r in &runs {
        if let Some(v) = r.result.final_rel_cov {
            checks.push(Check::below(
                format!("final_rel_cov[seed={}]", r.result.seed),
                v,
                th.steady_state,
            ));
        }
    }

    let passed = all_passed(&checks);
    let mut first = None;
    let mut seeds_out = Vec::with_capacity(runs.len());
    for r in runs {
        if first.is_none() {
            first = Some((r.trajectory, r.rows));
        }
        seeds_out.push(r.result);
    }
    let (trajectory, rows) = first.expect("at least one run");
    Ok(OuOutput {
        report: OuReport {
            schema_version: SCHEMA_VERSION,
            variant: cfg.model.variant,
            n_steps: n,
            transient_samples: skip,
            seeds: seeds_out,
            pooled_nis_mean,
            pooled_nis_mean_all: pooled_nis_all,
            innovation_variance,
            s_ss,
            steady_state: (&ss).into(),
            checks,
            passed,
        },
        trajectory,
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelErrors {
    pub model: String,
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
    /// Pearson correlation of the derivative track with `q̄̇` (first run).
    pub derivative_correlation: f64,
    pub nis_mean: f64,
}

impl ModelErrors {
    fn new(model: &str, r: &ErrorReport, derivative_correlation: f64, nis_mean: f64) -> Self {
        ModelErrors {
            model: model.to_owned(),
            bias_sq: r.bias_sq,
            variance: r.variance,
            mse: r.mse,
            derivative_correlation,
            nis_mean,
        }
    }
}

/// Published lab figures for the same comparison, kept for context only:
/// the lab waveform is not available, so they are not thresholds.
#[derive(Debug, Clone, Serialize)]
pub struct LabReference {
    pub model: &'static str,
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
}

pub const LAB_REFERENCE: [LabReference; 2] = [
    LabReference {
        model: "wiener_process",
        bias_sq: 3.36e-5,
        variance: 3.0e-6,
        mse: 3.66e-5,
    },
    LabReference {
        model: "polynomial",
        bias_sq: 1.02e-5,
        variance: 7.6e-6,
        mse: 1.78e-5,
    },
];

#[derive(Debug, Clone, Serialize)]
pub struct UnknownReport {
    pub schema_version: u32,
    pub n_runs: usize,
    pub n_steps: usize,
    pub seeds: Vec<u64>,
    pub transient_samples: usize,
    pub wiener_process: ModelErrors,
    pub polynomial: ModelErrors,
    pub lab_reference: Vec<LabReference>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Time series behind the tracking plots; estimates are from the first run,
/// bias curves from the ensemble.
#[derive(Debug, Clone, Default)]
pub struct UnknownTracks {
    pub t: Vec<f64>,
    pub q_bar: Vec<f64>,
    pub q_bar_dot: Vec<f64>,
    pub q_wp: Vec<f64>,
    pub q_pm: Vec<f64>,
    pub q_dot_wp: Vec<f64>,
    pub q_dot_pm: Vec<f64>,
    pub bias_sq_wp: Vec<f64>,
    pub bias_sq_pm: Vec<f64>,
}

pub struct UnknownOutput {
    pub report: UnknownReport,
    pub tracks: UnknownTracks,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa > 0.0 && sbb > 0.0 {
        sab / (saa * sbb).sqrt()
    } else {
        f64::NAN
    }
}

struct Tracked {
    q: Vec<f64>,
    q_dot: Option<Vec<f64>>,
    nis: f64,
}

fn track(model: &LinearModel, params: &SensorParams, frame: Frame, tr: &Trajectory, order: usize) -> Result<Tracked> {
    let run = filter_trajectory(model, tr)?;
    let beliefs = std::iter::once(&run.initial).chain(run.steps.iter().map(|s| &s.belief));
    let mut q = Vec::with_capacity(tr.len());
    let mut q_dot = Vec::with_capacity(tr.len());
    for b in beliefs {
        q.push(quadrature_estimate(b, params, frame, 0, b.t)?.0[0]);
        if order >= 1 {
            q_dot.push(quadrature_estimate(b, params, frame, 1, b.t)?.0[0]);
        }
    }
    let nis = mean(&run.steps.iter().map(|s| s.diagnostics.nis).collect::<Vec<_>>());
    Ok(Tracked {
        q,
        q_dot: (order >= 1).then_some(q_dot),
        nis,
    })
}

/// Unknown deterministic drive tracked by a Wiener-process and a polynomial
/// model on identical data.
pub fn experiment_unknown(cfg: &ExperimentConfig) -> Result<UnknownOutput> {
    let u = &cfg.unknown;
    let sensor = cfg.sensor.params()?;
    let spec: WaveformSpec = u.spec()?;
    let frame: Frame = u.frame.into();
    let with_q = |q: f64| SensorParams {
        q_q: q,
        q_p: q,
        kappa_q: 0.0,
        kappa_p: 0.0,
        ..sensor
    };
    let (p_wp, p_pm) = (with_q(u.q_wp), with_q(u.q_pm));
    let wp = build_model(&p_wp, ModelVariant::WienerProcess { frame })?;
    let pm_variant = ModelVariant::Polynomial {
        order: u.pm_order,
        frame,
    };
    let pm = build_model(&p_pm, pm_variant)?;
    let skip = atomsense_core::validation::transient_samples(u.transient, sensor.delta);
    if skip + 2 >= u.n_steps {
        bail!("transient window leaves no samples");
    }
    let seeds = replicate(u.n_runs, u.seed)?;

    let runs = fan_out(&seeds, |seed| {
        let tr = simulate(&sensor, &spec, u.n_steps, seed)?;
        let a = track(&wp, &p_wp, frame, &tr, 0)?;
        let b = track(&pm, &p_pm, frame, &tr, u.pm_order)?;
        Ok((tr, a, b))
    })?;

    let (tr0, wp0, pm0) = &runs[0];
    let q_bar = tr0.signal_mean.clone().expect("deterministic waveform");
    let q_bar_dot = tr0.signal_rate.clone().expect("deterministic waveform");
    let stats = |pick: &dyn Fn(&(Trajectory, Tracked, Tracked)) -> &Tracked| {
        let refs: Vec<&[f64]> = runs.iter().map(|r| &pick(r).q[skip..]).collect();
        true_error_stats(&refs, &q_bar[skip..])
    };
    let e_wp = stats(&|r| &r.1)?;
    let e_pm = stats(&|r| &r.2)?;

    let dt = sensor.delta;
    let q_dot_wp: Vec<f64> = std::iter::once(f64::NAN)
        .chain(wp0.q.windows(2).map(|w| (w[1] - w[0]) / dt))
        .collect();
    let from = skip.max(1);
    let corr_wp = pearson(&q_dot_wp[from..], &q_bar_dot[from..]);
    let q_dot_pm = pm0.q_dot.clone().unwrap_or_else(|| vec![f64::NAN; pm0.q.len()]);
    let corr_pm = pearson(&q_dot_pm[from..], &q_bar_dot[from..]);
    let nis_wp = mean(&runs.iter().map(|r| r.1.nis).collect::<Vec<_>>());
    let nis_pm = mean(&runs.iter().map(|r| r.2.nis).collect::<Vec<_>>());

    let wp_err = ModelErrors::new("wiener_process", &e_wp.report, corr_wp, nis_wp);
    let pm_err = ModelErrors::new("polynomial", &e_pm.report, corr_pm, nis_pm);
    let checks = vec![
        Check::below("mse_pm/mse_wp", pm_err.mse / wp_err.mse, 1.0),
        Check::below("bias_sq_pm/bias_sq_wp", pm_err.bias_sq / wp_err.bias_sq, 1.0),
        Check::below("var_wp/var_pm", wp_err.variance / pm_err.variance, 1.0),
    ];
    let passed = all_passed(&checks);

    let mut bias_sq_wp = vec![f64::NAN; skip];
    bias_sq_wp.extend(e_wp.bias.iter().map(|b| b * b));
    let mut bias_sq_pm = vec![f64::NAN; skip];
    bias_sq_pm.extend(e_pm.bias.iter().map(|b| b * b));
    let tracks = UnknownTracks {
        t: tr0.times.clone(),
        q_bar,
        q_bar_dot,
        q_wp: wp0.q.clone(),
        q_pm: pm0.q.clone(),
        q_dot_wp,
        q_dot_pm,
        bias_sq_wp,
        bias_sq_pm,
    };
    Ok(UnknownOutput {
        report: UnknownReport {
            schema_version: SCHEMA_VERSION,
            n_runs: u.n_runs,
            n_steps: u.n_steps,
            seeds,
            transient_samples: skip,
            wiener_process: wp_err,
            polynomial: pm_err,
            lab_reference: LAB_REFERENCE.to_vec(),
            checks,
            passed,
        },
        tracks,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub s_ph: f64,
    pub s_at: f64,
    pub t2: f64,
    pub linewidth_hz: f64,
    pub omega0: f64,
    pub std_errors: [f64; 4],
    pub rss: f64,
    pub iterations: usize,
}

impl From<&PsdFit> for FitReport {
    fn from(f: &PsdFit) -> Self {
        FitReport {
            s_ph: f.s_ph,
            s_at: f.s_at,
            t2: f.t2,
            linewidth_hz: f.linewidth_hz(),
            omega0: f.omega0,
            std_errors: f.std_errors,
            rss: f.rss,
            iterations: f.iterations,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub n_samples: usize,
    pub segment_len: usize,
    pub n_segments: usize,
    pub fit: FitReport,
    pub linewidth_rel_err: f64,
    pub ratio_ph_at: f64,
    pub ratio_rel_err: f64,
    /// Spin-noise rate and shot-noise intensity of the rebuilt filter.
    pub q_spin: f64,
    pub r: f64,
    /// Mean NIS of the rebuilt filter on fresh data; absent when fitting a file.
    pub nis_mean: Option<f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub struct CalibrationOutput {
    pub report: CalibrationReport,
    pub psd: PsdEstimate,
    pub fit: PsdFit,
}

/// Welch estimate and Lorentzian fit of a sampled output record.
pub fn fit_spectrum(z: &[f64], delta: f64, cfg: &ExperimentConfig) -> Result<(PsdEstimate, PsdFit)> {
    let sc = &cfg.spectroscopy;
    let psd = estimate_psd(z, delta, sc.segment_len, sc.window.into())?;
    let fit = fit_lorentzian(&psd, (sc.band_hz[0], sc.band_hz[1]))?;
    Ok((psd, fit))
}

fn calibration_report(
    cfg: &ExperimentConfig,
    n_samples: usize,
    psd: &PsdEstimate,
    fit: &PsdFit,
    nis_mean: Option<f64>,
) -> Result<CalibrationReport> {
    let sensor = cfg.sensor.params()?;
    let sc = &cfg.spectroscopy;
    let (q_spin, _, r) = spin_noise_rates(fit, sensor.g_d)?;
    let linewidth_rel_err = fit.linewidth_hz() * 2.0 * std::f64::consts::PI * sensor.t2 - 1.0;
    let ratio = fit.s_ph / fit.s_at;
    let ratio_rel_err = ratio / (cfg.sensor.s_ph / cfg.sensor.s_at) - 1.0;
    let mut checks = vec![
        Check::below("linewidth_rel_err", linewidth_rel_err.abs(), sc.rel_tol),
        Check::below("ratio_rel_err", ratio_rel_err.abs(), sc.rel_tol),
    ];
    if let Some(nis) = nis_mean {
        checks.push(Check::within("nis_mean", nis, sc.nis_mean[0], sc.nis_mean[1]));
    }
    let passed = all_passed(&checks);
    Ok(CalibrationReport {
        schema_version: SCHEMA_VERSION,
        n_samples,
        segment_len: psd.segment_len,
        n_segments: psd.n_segments,
        fit: fit.into(),
        linewidth_rel_err,
        ratio_ph_at: ratio,
        ratio_rel_err,
        q_spin,
        r,
        nis_mean,
        checks,
        passed,
    })
}

/// Fits a recorded output; no filter check.
pub fn calibrate_record(cfg: &ExperimentConfig, z: &[f64], delta: f64) -> Result<CalibrationOutput> {
    let (psd, fit) = fit_spectrum(z, delta, cfg)?;
    let report = calibration_report(cfg, z.len(), &psd, &fit, None)?;
    Ok(CalibrationOutput { report, psd, fit })
}

/// Signal-free run → spectrum fit → rebuilt filter checked on fresh data.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<CalibrationOutput> {
    let sensor = SensorParams {
        g_p: 0.0,
        ..cfg.sensor.params()?
    };
    let sc = &cfg.spectroscopy;
    let quiet = WaveformSpec {
        kind: WaveformKind::Ou { kappa: 100.0 },
        additive_noise_rate: 0.0,
    };
    let record = simulate(&sensor, &quiet, sc.n_steps, sc.seed)?;
    let (psd, fit) = fit_spectrum(&record.observations, sensor.delta, cfg)?;
    drop(record);

    let (q_spin, _, r) = spin_noise_rates(&fit, sensor.g_d)?;
    let rebuilt = SensorParams {
        omega_l: fit.omega0,
        t2: fit.t2,
        q_y: q_spin,
        q_z: q_spin,
        r,
        ..sensor
    };
    let model = build_model(&rebuilt, ModelVariant::RotatingFrame)?;
    let fresh = simulate(&sensor, &quiet, sc.check_steps, sc.seed.wrapping_add(1))?;
    let run = filter_trajectory(&model, &fresh)?;
    let skip = atomsense_core::validation::transient_samples(5.0 * fit.t2, sensor.delta);
    let nis: Vec<f64> = run.steps.iter().skip(skip).map(|s| s.diagnostics.nis).collect();
    if nis.is_empty() {
        bail!("spectroscopy.check_steps is shorter than the filter transient");
    }
    let report = calibration_report(cfg, sc.n_steps, &psd, &fit, Some(mean(&nis)))?;
    Ok(CalibrationOutput { report, psd, fit })
}

#[derive(Debug, Clone, Serialize)]
pub struct WhitenessSummary {
    pub max_lag: usize,
    pub bound: f64,
    pub max_abs_autocorrelation: Option<f64>,
    pub degenerate: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub schema_version: u32,
    pub n_samples: usize,
    pub transient_samples: usize,
    pub coverage_waveform: Option<f64>,
    pub coverage_innovation: f64,
    pub nis_mean: f64,
    pub whiteness: WhitenessSummary,
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub const WHITENESS_MAX_LAG: usize = 20;

/// Consistency checks on filter output, with the waveform truth when given.
pub fn validate_outputs(
    cfg: &ExperimentConfig,
    truth: Option<&TrajectoryTable>,
    rows: &[FilterRow],
) -> Result<ValidationReport> {
    let skip = cfg.transient_samples()?.max(1);
    if rows.len() <= skip + 1 {
        bail!("filter output is shorter than the transient window");
    }
    let used = &rows[skip..];
    let inn: Vec<f64> = used.iter().map(|r| r.innovation).collect();
    let s: Vec<f64> = used.iter().map(|r| r.s).collect();
    let coverage_innovation = frac_in(&inn, &s)?;
    let nis_mean = mean(&used.iter().map(|r| r.nis).collect::<Vec<_>>());
    let coverage_waveform = match truth {
        Some(t) => {
            if t.e_true.len() != rows.len() {
                bail!("trajectory and filter output differ in length");
            }
            let err: Vec<f64> = used
                .iter()
                .zip(&t.e_true[skip..])
                .map(|(r, e)| r.e_hat - e)
                .collect();
            let var: Vec<f64> = used.iter().map(|r| r.e_var).collect();
            Some(frac_in(&err, &var)?)
        }
        None => None,
    };
    let normalized: Vec<f64> = inn.iter().zip(&s).map(|(v, s)| v / s.sqrt()).collect();
    let w = whiteness_test(&normalized, WHITENESS_MAX_LAG)?;
    let max_abs = w
        .autocorrelations
        .as_ref()
        .map(|a| a.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    let th = &cfg.thresholds;
    let mut checks = vec![
        Check::within("coverage_innovation", coverage_innovation, th.coverage[0], th.coverage[1]),
        Check::within("nis_mean", nis_mean, th.nis_mean[0], th.nis_mean[1]),
        Check::below("whiteness_max_abs_acf", max_abs.unwrap_or(f64::INFINITY), w.bound),
    ];
    if let Some(c) = coverage_waveform {
        checks.insert(0, Check::within("coverage_waveform", c, th.coverage[0], th.coverage[1]));
    }
    let passed = all_passed(&checks);
    Ok(ValidationReport {
        schema_version: SCHEMA_VERSION,
        n_samples: used.len(),
        transient_samples: skip,
        coverage_waveform,
        coverage_innovation,
        nis_mean,
        whiteness: WhitenessSummary {
            max_lag: WHITENESS_MAX_LAG,
            bound: w.bound,
            max_abs_autocorrelation: max_abs,
            degenerate: w.degenerate,
            passed: w.passed,
        },
        checks,
        passed,
    })
}

/// Filters a trajectory file with the configured model.
pub fn filter_table(cfg: &ExperimentConfig, table: &TrajectoryTable) -> Result<Vec<FilterRow>> {
    let (model, params, variant) = filter_model(cfg)?;
    let run = run_filter(&model, &observations(&table.t, &table.z))?;
    filter_rows(&run, &params, variant.frame())
}
