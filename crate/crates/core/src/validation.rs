//! Statistical checks of filter output against ground truth: bias/variance
//! decomposition across replicate runs, confidence-region coverage,
//! innovation whiteness and histogram comparison.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};

/// Two-sided 95% quantile of the standard normal.
pub const Z_975: f64 = 1.959_963_984_540_054;

/// Time-averaged error statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Time average of the squared ensemble-mean error.
    pub bias_sq: f64,
    /// Time average of the across-run variance.
    pub variance: f64,
    /// `bias_sq + variance`.
    pub mse: f64,
    pub coverage_95: Option<f64>,
    pub nis_mean: Option<f64>,
    pub n_samples: usize,
    pub n_runs: usize,
}

/// Per-time bias and variance curves plus their time averages.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurves {
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    pub report: ErrorReport,
}

/// Bias/variance/MSE across `runs[r][k]` estimates of `truth[k]`.
///
/// Variance is the population variance across runs (divide by the run
/// count), which makes `mse = bias² + var` equal the time-averaged mean
/// squared error exactly.
pub fn true_error_stats(runs: &[&[f64]], truth: &[f64]) -> Result<ErrorCurves> {
    if runs.len() < 2 {
        return Err(Error::InsufficientReplicates {
            needed: 2,
            got: runs.len(),
        });
    }
    let n = truth.len();
    if n == 0 || runs.iter().any(|r| r.len() != n) {
        return Err(invalid("every run must match the truth length"));
    }
    let nr = runs.len() as f64;
    let mut bias = Vec::with_capacity(n);
    let mut variance = Vec::with_capacity(n);
    for k in 0..n {
        let mean_err = runs.iter().map(|r| r[k] - truth[k]).sum::<f64>() / nr;
        let var = runs
            .iter()
            .map(|r| {
                let d = r[k] - truth[k] - mean_err;
                d * d
            })
            .sum::<f64>()
            / nr;
        bias.push(mean_err);
        variance.push(var);
    }
    let bias_sq = bias.iter().map(|b| b * b).sum::<f64>() / n as f64;
    let var = variance.iter().sum::<f64>() / n as f64;
    Ok(ErrorCurves {
        bias,
        variance,
        report: ErrorReport {
            bias_sq,
            variance: var,
            mse: bias_sq + var,
            coverage_95: None,
            nis_mean: None,
            n_samples: n,
            n_runs: runs.len(),
        },
    })
}

/// Mean squared error of a single run.
pub fn mean_squared_error(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() || truth.is_empty() {
        return Err(invalid("estimates and truth must have equal, non-zero length"));
    }
    Ok(estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / truth.len() as f64)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Standard normal quantile by bisection on [`normal_cdf`] followed by
/// Newton polishing.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid("probability must lie in (0, 1)"));
    }
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..3 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * core::f64::consts::PI).sqrt();
        if pdf > 0.0 {
            x -= (normal_cdf(x) - p) / pdf;
        }
    }
    Ok(x)
}

/// Fraction of `|e_k| / √v_k ≤ z`, `z` the two-sided quantile for `level`.
pub fn coverage_test(errors: &[f64], predicted_vars: &[f64], level: f64) -> Result<f64> {
    if errors.len() != predicted_vars.len() || errors.is_empty() {
        return Err(invalid("errors and variances must have equal, non-zero length"));
    }
    if predicted_vars.iter().any(|v| !(*v > 0.0)) {
        return Err(invalid("predicted variances must be positive"));
    }
    let z = if (level - 0.95).abs() < 1e-15 {
        Z_975
    } else {
        normal_quantile(0.5 + 0.5 * level)?
    };
    let inside = errors
        .iter()
        .zip(predicted_vars)
        .filter(|(e, v)| e.abs() <= z * v.sqrt())
        .count();
    Ok(inside as f64 / errors.len() as f64)
}

/// Sample autocorrelation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenessReport {
    /// `ρ_l` for `l = 1..=max_lag`; `None` when the sequence has zero variance.
    pub autocorrelations: Option<Vec<f64>>,
    pub bound: f64,
    pub passed: bool,
    pub degenerate: bool,
}

/// Checks `|ρ_l| ≤ 3/√N` for lags `1..=max_lag`.
pub fn whiteness_test(x: &[f64], max_lag: usize) -> Result<WhitenessReport> {
    let n = x.len();
    if max_lag == 0 || n <= 10 * max_lag {
        return Err(invalid("need max_lag ≥ 1 and more than 10·max_lag samples"));
    }
    let bound = 3.0 / (n as f64).sqrt();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    if !(c0 > 0.0) {
        return Ok(WhitenessReport {
            autocorrelations: None,
            bound,
            passed: false,
            degenerate: true,
        });
    }
    let rho: Vec<f64> = (1..=max_lag)
        .map(|l| {
            (0..n - l)
                .map(|k| (x[k] - mean) * (x[k + l] - mean))
                .sum::<f64>()
                / c0
        })
        .collect();
    let passed = rho.iter().all(|r| r.abs() <= bound);
    Ok(WhitenessReport {
        autocorrelations: Some(rho),
        bound,
        passed,
        degenerate: false,
    })
}

/// Normalized histogram with the predicted Gaussian density at bin centres.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub centers: Vec<f64>,
    pub counts: Vec<usize>,
    /// Empirical density (integrates to one).
    pub density: Vec<f64>,
    /// `N(0, σ²)` density at each centre.
    pub predicted: Vec<f64>,
}

impl Histogram {
    /// Pearson χ² statistic against the predicted Gaussian (bins with
    /// expected count below 5 merged into their neighbours) and its degrees
    /// of freedom.
    pub fn chi_square(&self, sigma: f64) -> (f64, usize) {
        let total: usize = self.counts.iter().sum();
        let mut obs_acc = 0.0;
        let mut exp_acc = 0.0;
        let mut stat = 0.0;
        let mut bins = 0usize;
        for (i, c) in self.counts.iter().enumerate() {
            let p = normal_cdf(self.edges[i + 1] / sigma) - normal_cdf(self.edges[i] / sigma);
            obs_acc += *c as f64;
            exp_acc += p * total as f64;
            if exp_acc >= 5.0 {
                stat += (obs_acc - exp_acc) * (obs_acc - exp_acc) / exp_acc;
                bins += 1;
                obs_acc = 0.0;
                exp_acc = 0.0;
            }
        }
        if exp_acc > 0.0 {
            stat += (obs_acc - exp_acc) * (obs_acc - exp_acc) / exp_acc;
            bins += 1;
        }
        (stat, bins.saturating_sub(1))
    }
}

/// Histogram over `±max(4σ, max|x|)` with `n_bins` equal bins.
pub fn histogram_report(samples: &[f64], predicted_sigma: f64, n_bins: usize) -> Result<Histogram> {
    if n_bins < 3 {
        return Err(invalid("need at least 3 bins"));
    }
    if !(predicted_sigma > 0.0) || !predicted_sigma.is_finite() {
        return Err(invalid("predicted sigma must be positive"));
    }
    if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
        return Err(invalid("samples must be non-empty and finite"));
    }
    let max_abs = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let half = (4.0 * predicted_sigma).max(max_abs);
    let width = 2.0 * half / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| -half + i as f64 * width).collect();
    let mut counts = alloc::vec![0usize; n_bins];
    for v in samples {
        let idx = (((v + half) / width).floor() as isize).clamp(0, n_bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    let total = samples.len() as f64;
    let centers: Vec<f64> = (0..n_bins).map(|i| -half + (i as f64 + 0.5) * width).collect();
    let norm = 1.0 / (predicted_sigma * (2.0 * core::f64::consts::PI).sqrt());
    let predicted = centers
        .iter()
        .map(|c| norm * (-0.5 * (c / predicted_sigma).powi(2)).exp())
        .collect();
    let density = counts.iter().map(|c| *c as f64 / (total * width)).collect();
    Ok(Histogram {
        edges,
        centers,
        counts,
        density,
        predicted,
    })
}

/// Index of the first sample after a transient of `duration` seconds.
pub fn transient_samples(duration: f64, delta: f64) -> usize {
    if !(duration > 0.0) || !(delta > 0.0) {
        return 0;
    }
    (duration / delta).ceil() as usize
}
