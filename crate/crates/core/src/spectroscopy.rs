//! Spin-noise spectroscopy: Welch PSD estimates of the photocurrent and a
//! Lorentzian-plus-floor fit that yields `{T₂, ω₀, S_at, S_ph}`.
//!
//! PSD convention: `power[k]` is the two-sided density (A²/Hz) evaluated on
//! the non-negative frequency grid, so white noise of per-sample variance
//! `σ²` sampled every `Δ` has level `σ²Δ`. With per-sample variance `R/Δ`
//! this makes the fitted floor `S_ph` equal to the shot-noise intensity `R`.
//! The fitted model is
//! `S(ω) = S_ph + S_at / (1 + T₂² (ω − ω₀)²)`, so `S_at` is the height of the
//! Lorentzian above the floor.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, Error, Result};

/// Taper applied to each segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(&self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => alloc::vec![1.0; len],
            Window::Hann => (0..len)
                .map(|i| {
                    let x = core::f64::consts::PI * i as f64 / len as f64;
                    let s = x.sin();
                    s * s
                })
                .collect(),
        }
    }
}

/// Averaged periodogram.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    /// Hz, ascending from 0 to the Nyquist frequency.
    pub freqs: Vec<f64>,
    /// A²/Hz.
    pub power: Vec<f64>,
    pub n_segments: usize,
    pub segment_len: usize,
    pub window: Window,
    /// Equivalent noise bandwidth of one bin, Hz.
    pub resolution_bw: f64,
}

impl PsdEstimate {
    /// Integral of the two-sided density over `[−f_s/2, f_s/2]`; equals the
    /// (mean-removed) signal variance.
    pub fn total_power(&self) -> f64 {
        if self.freqs.len() < 2 {
            return 0.0;
        }
        let df = self.freqs[1] - self.freqs[0];
        let last = self.power.len() - 1;
        let nyquist_bin = self.segment_len.is_multiple_of(2);
        let mut sum = 0.0;
        for (k, p) in self.power.iter().enumerate() {
            let edge = k == 0 || (k == last && nyquist_bin);
            sum += if edge { *p } else { 2.0 * p };
        }
        sum * df
    }
}

/// Result of [`fit_lorentzian`].
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFit {
    /// Floor, A²/Hz.
    pub s_ph: f64,
    /// Lorentzian height above the floor, A²/Hz.
    pub s_at: f64,
    /// s
    pub t2: f64,
    /// rad/s
    pub omega0: f64,
    /// One-sigma errors in the order `[s_ph, s_at, t2, omega0]`.
    pub std_errors: [f64; 4],
    /// Residual sum of squares of the log-spectrum residuals.
    pub rss: f64,
    pub iterations: usize,
}

impl PsdFit {
    /// Half width at half maximum, Hz: `1/(2π T₂)`.
    pub fn linewidth_hz(&self) -> f64 {
        1.0 / (2.0 * core::f64::consts::PI * self.t2)
    }

    /// Model density at frequency `f` in Hz.
    pub fn model(&self, f: f64) -> f64 {
        lorentzian(
            self.s_ph,
            self.s_at,
            self.t2,
            self.omega0,
            2.0 * core::f64::consts::PI * f,
        )
    }
}

pub fn lorentzian(s_ph: f64, s_at: f64, t2: f64, omega0: f64, omega: f64) -> f64 {
    let x = t2 * (omega - omega0);
    s_ph + s_at / (1.0 + x * x)
}

#[cfg(feature = "std")]
fn periodogram_segments(
    samples: &[f64],
    delta: f64,
    segment_len: usize,
    hop: usize,
    window: Window,
    mut emit: impl FnMut(usize, Vec<f64>),
) {
    use rustfft::{num_complex::Complex, FftPlanner};

    let w = window.coefficients(segment_len);
    let wss: f64 = w.iter().map(|v| v * v).sum();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(segment_len);
    let nbins = segment_len / 2 + 1;
    let mut buf = alloc::vec![Complex::new(0.0, 0.0); segment_len];
    let mut start = 0;
    while start + segment_len <= samples.len() {
        let seg = &samples[start..start + segment_len];
        let mean = seg.iter().sum::<f64>() / segment_len as f64;
        for (b, (x, wi)) in buf.iter_mut().zip(seg.iter().zip(&w)) {
            *b = Complex::new((x - mean) * wi, 0.0);
        }
        fft.process(&mut buf);
        let p = buf[..nbins]
            .iter()
            .map(|c| c.norm_sqr() * delta / wss)
            .collect();
        emit(start, p);
        start += hop;
    }
}

#[cfg(feature = "std")]
fn check_sampling(samples: &[f64], delta: f64, segment_len: usize) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(invalid("sampling period must be positive"));
    }
    if segment_len < 4 {
        return Err(invalid("segment length must be at least 4"));
    }
    if samples.len() < segment_len {
        return Err(invalid("fewer samples than one segment"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(invalid("samples must be finite"));
    }
    Ok(())
}

/// Welch estimate with 50% overlapping segments of `segment_len` samples;
/// each segment has its mean removed before windowing.
#[cfg(feature = "std")]
pub fn estimate_psd(
    samples: &[f64],
    delta: f64,
    segment_len: usize,
    window: Window,
) -> Result<PsdEstimate> {
    check_sampling(samples, delta, segment_len)?;
    let hop = (segment_len / 2).max(1);
    let nbins = segment_len / 2 + 1;
    let mut acc = alloc::vec![0.0; nbins];
    let mut count = 0usize;
    periodogram_segments(samples, delta, segment_len, hop, window, |_, p| {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
        count += 1;
    });
    for a in acc.iter_mut() {
        *a /= count as f64;
    }
    let w = window.coefficients(segment_len);
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    let fs = 1.0 / delta;
    Ok(PsdEstimate {
        freqs: (0..nbins).map(|k| k as f64 * fs / segment_len as f64).collect(),
        power: acc,
        n_segments: count,
        segment_len,
        window,
        resolution_bw: fs * s2 / (s1 * s1),
    })
}

/// Short-time periodograms.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Centre time of each column, s.
    pub times: Vec<f64>,
    pub freqs: Vec<f64>,
    /// `power[column][bin]`, A²/Hz.
    pub power: Vec<Vec<f64>>,
}

/// One windowed periodogram per `hop` samples.
#[cfg(feature = "std")]
pub fn spectrogram(
    samples: &[f64],
    delta: f64,
    window_len: usize,
    hop: usize,
    window: Window,
) -> Result<Spectrogram> {
    if hop == 0 {
        return Err(invalid("hop must be positive"));
    }
    check_sampling(samples, delta, window_len)?;
    let mut times = Vec::new();
    let mut power = Vec::new();
    periodogram_segments(samples, delta, window_len, hop, window, |start, p| {
        times.push((start as f64 + 0.5 * window_len as f64) * delta);
        power.push(p);
    });
    let fs = 1.0 / delta;
    Ok(Spectrogram {
        times,
        freqs: (0..window_len / 2 + 1)
            .map(|k| k as f64 * fs / window_len as f64)
            .collect(),
        power,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const MAX_FIT_ITER: usize = 500;

/// Fits `S(ω) = S_ph + S_at/(1 + T₂²(ω−ω₀)²)` to the PSD bins inside
/// `band = (f_lo, f_hi)` Hz by Levenberg-Marquardt on log residuals.
///
/// Parameters are `[ln S_ph, ln S_at, ln T₂, (ω₀ − ω_init)·T₂_init]`; the
/// damping starts at 1e−3, is divided by 10 after an accepted step and
/// multiplied by 10 after a rejected one.
pub fn fit_lorentzian(psd: &PsdEstimate, band: (f64, f64)) -> Result<PsdFit> {
    let (lo, hi) = band;
    if !(hi > lo) {
        return Err(invalid("band must have f_hi > f_lo"));
    }
    let mut f = Vec::new();
    let mut d = Vec::new();
    for (fi, pi) in psd.freqs.iter().zip(&psd.power) {
        if *fi >= lo && *fi <= hi {
            f.push(*fi);
            d.push(*pi);
        }
    }
    if f.len() < 8 {
        return Err(invalid("band holds fewer than 8 PSD bins"));
    }
    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("PSD must be positive inside the fit band"));
    }
    let two_pi = 2.0 * core::f64::consts::PI;
    let omega: Vec<f64> = f.iter().map(|x| two_pi * x).collect();
    let ln_d: Vec<f64> = d.iter().map(|x| x.ln()).collect();

    // Initial guesses.
    let (ipk, &peak) = d
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    if ipk == 0 || ipk == d.len() - 1 {
        return Err(invalid("band does not contain a local maximum"));
    }
    let mut sorted = d.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let floor0 = sorted[sorted.len() / 10];
    let half = floor0 + 0.5 * (peak - floor0);
    let mut left = ipk;
    while left > 0 && d[left] > half {
        left -= 1;
    }
    let mut right = ipk;
    while right < d.len() - 1 && d[right] > half {
        right += 1;
    }
    let df = (f[1] - f[0]).abs();
    let hwhm = (0.5 * (f[right] - f[left])).max(df);
    let mut wings: Vec<f64> = f
        .iter()
        .zip(&d)
        .filter(|(fi, _)| (**fi - f[ipk]).abs() > 5.0 * hwhm)
        .map(|(_, di)| *di)
        .collect();
    let s_ph0 = if wings.len() >= 5 { median(&mut wings) } else { floor0 };
    let s_at0 = (peak - s_ph0).max(peak * 1e-3);
    let t2_0 = 1.0 / (two_pi * hwhm);
    let w0 = omega[ipk];
    let scale = t2_0;

    let unpack = |u: &[f64; 4]| (u[0].exp(), u[1].exp(), u[2].exp(), w0 + u[3] / scale);
    let residuals = |u: &[f64; 4]| -> (DVector<f64>, DMatrix<f64>) {
        let (s_ph, s_at, t2, om0) = unpack(u);
        let n = omega.len();
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, 4);
        for i in 0..n {
            let x = t2 * (omega[i] - om0);
            let l = 1.0 / (1.0 + x * x);
            let m = s_ph + s_at * l;
            r[i] = ln_d[i] - m.ln();
            j[(i, 0)] = -s_ph / m;
            j[(i, 1)] = -s_at * l / m;
            j[(i, 2)] = 2.0 * s_at * x * x * l * l / m;
            j[(i, 3)] = -2.0 * s_at * x * t2 * l * l / m / scale;
        }
        (r, j)
    };

    let mut u = [s_ph0.ln(), s_at0.ln(), t2_0.ln(), 0.0];
    let (mut r, mut j) = residuals(&u);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let fail = |reason: &str, it: usize, u: &[f64; 4]| {
        let (a, b, c, e) = unpack(u);
        Error::FitFailed {
            reason: String::from(reason),
            iterations: it,
            last: [a, b, c, e],
        }
    };
    for it in 1..=MAX_FIT_ITER {
        let jtj = j.transpose() * &j;
        let grad = j.transpose() * &r;
        let gnorm = grad.amax();
        if gnorm <= 1e-8 * (1.0 + cost) {
            return finish(u, &unpack, &j, cost, omega.len(), it - 1);
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..4 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let step = match a.lu().solve(&(-&grad)) {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial = [u[0] + step[0], u[1] + step[1], u[2] + step[2], u[3] + step[3]];
            let (rt, jt) = residuals(&trial);
            let ct = rt.norm_squared();
            if ct.is_finite() && ct <= cost {
                let small = step.amax() <= 1e-13 * (1.0 + u.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
                u = trial;
                r = rt;
                j = jt;
                cost = ct;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if small {
                    return finish(u, &unpack, &j, cost, omega.len(), it);
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted {
            // No descent direction left: the gradient test is the arbiter.
            if gnorm <= 1e-6 * (1.0 + cost) {
                return finish(u, &unpack, &j, cost, omega.len(), it);
            }
            return Err(fail("damping exhausted without descent", it, &u));
        }
        if u[1] < -700.0 || u[2].abs() > 700.0 {
            return Err(fail("Lorentzian amplitude or width diverged", it, &u));
        }
    }
    Err(fail("iteration limit reached", MAX_FIT_ITER, &u))
}

fn finish(
    u: [f64; 4],
    unpack: &impl Fn(&[f64; 4]) -> (f64, f64, f64, f64),
    j: &DMatrix<f64>,
    cost: f64,
    n: usize,
    iterations: usize,
) -> Result<PsdFit> {
    let (s_ph, s_at, t2, omega0) = unpack(&u);
    let dof = n.saturating_sub(4).max(1) as f64;
    let sigma2 = cost / dof;
    let jtj = j.transpose() * j;
    let cov = jtj.try_inverse().unwrap_or_else(|| DMatrix::from_element(4, 4, f64::INFINITY));
    let se = |k: usize| (cov[(k, k)].abs() * sigma2).sqrt();
    // u[3] = (ω₀ − w0)·scale with scale = ω-derivative factor; recover dω₀.
    let d_omega = {
        let (_, _, _, om_plus) = unpack(&[u[0], u[1], u[2], u[3] + 1.0]);
        (om_plus - omega0).abs()
    };
    Ok(PsdFit {
        s_ph,
        s_at,
        t2,
        omega0,
        std_errors: [s_ph * se(0), s_at * se(1), t2 * se(2), d_omega * se(3)],
        rss: cost,
        iterations,
    })
}

#[cfg(all(test, feature = "std"))]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn white(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            })
            .collect()
    }

    #[test]
    fn white_noise_level_and_parseval() {
        let delta = 5e-6;
        let x = white(256 * 51, 2.0, 7);
        let psd = estimate_psd(&x, delta, 512, Window::Hann).unwrap();
        assert!(psd.n_segments >= 50);
        let level = 4.0 * delta;
        let mean: f64 = psd.power[1..psd.power.len() - 1].iter().sum::<f64>()
            / (psd.power.len() - 2) as f64;
        assert!((mean / level - 1.0).abs() < 0.03);
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((psd.total_power() / var - 1.0).abs() < 0.05);
    }

    #[test]
    fn sinusoid_peak_and_zero_input() {
        let delta = 1e-4;
        let f0 = 1250.0;
        let x: Vec<f64> = (0..4096)
            .map(|k| (2.0 * core::f64::consts::PI * f0 * k as f64 * delta).sin())
            .collect();
        let psd = estimate_psd(&x, delta, 1024, Window::Hann).unwrap();
        let (imax, _) = psd
            .power
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert!((psd.freqs[imax] - f0).abs() <= psd.freqs[1]);
        let z = estimate_psd(&vec![0.0; 4096], delta, 1024, Window::Hann).unwrap();
        assert!(z.power.iter().all(|p| *p == 0.0));
        assert!(estimate_psd(&x[..100], delta, 1024, Window::Hann).is_err());
    }

    #[test]
    fn spectrogram_single_column_matches_psd() {
        let x = white(2048, 1.0, 3);
        let s = spectrogram(&x, 1e-3, 2048, 2048, Window::Hann).unwrap();
        let p = estimate_psd(&x, 1e-3, 2048, Window::Hann).unwrap();
        assert_eq!(s.power.len(), 1);
        assert_eq!(s.power[0], p.power);
        assert!(spectrogram(&x, 1e-3, 256, 0, Window::Hann).is_err());
    }

    fn synthetic(noise: f64, seed: u64) -> PsdEstimate {
        let two_pi = 2.0 * core::f64::consts::PI;
        let (s_ph, s_at, t2, w0) = (96.0e-24, 118.7e-24, 1.0 / (two_pi * 182.0), two_pi * 9999.8);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let freqs: Vec<f64> = (0..2000).map(|k| 5000.0 + 5.0 * k as f64).collect();
        let power = freqs
            .iter()
            .map(|f| {
                let z: f64 = StandardNormal.sample(&mut rng);
                lorentzian(s_ph, s_at, t2, w0, two_pi * f) * (1.0 + noise * z)
            })
            .collect();
        PsdEstimate {
            freqs,
            power,
            n_segments: 1,
            segment_len: 4000,
            window: Window::Hann,
            resolution_bw: 5.0,
        }
    }

    #[test]
    fn recovers_table_parameters() {
        let psd = synthetic(0.01, 11);
        let fit = fit_lorentzian(&psd, (6000.0, 14000.0)).unwrap();
        assert!((fit.s_ph / 96.0e-24 - 1.0).abs() < 0.05);
        assert!((fit.s_at / 118.7e-24 - 1.0).abs() < 0.05);
        assert!((fit.linewidth_hz() / 182.0 - 1.0).abs() < 0.05);
        assert!((fit.omega0 / (2.0 * core::f64::consts::PI * 9999.8) - 1.0).abs() < 0.05);
        assert!(fit.std_errors.iter().all(|e| e.is_finite() && *e > 0.0));
    }

    #[test]
    fn fit_scales_with_power() {
        let psd = synthetic(0.01, 5);
        let mut scaled = psd.clone();
        for p in scaled.power.iter_mut() {
            *p *= 1e6;
        }
        let a = fit_lorentzian(&psd, (6000.0, 14000.0)).unwrap();
        let b = fit_lorentzian(&scaled, (6000.0, 14000.0)).unwrap();
        assert!((b.s_ph / a.s_ph / 1e6 - 1.0).abs() < 1e-6);
        assert!((b.s_at / a.s_at / 1e6 - 1.0).abs() < 1e-6);
        assert!((b.t2 / a.t2 - 1.0).abs() < 1e-6);
        assert!((b.omega0 / a.omega0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flat_spectrum_is_not_a_resonance() {
        let mut psd = synthetic(0.0, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for p in psd.power.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = 1.0 + 0.01 * z;
        }
        match fit_lorentzian(&psd, (6000.0, 14000.0)) {
            Err(Error::FitFailed { .. }) | Err(Error::InvalidInput(_)) => {}
            Ok(fit) => assert!(fit.s_at < 3.0 * fit.std_errors[1].max(0.01 * fit.s_ph)),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
