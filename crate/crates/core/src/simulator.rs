//! Ground-truth trajectories of the sensor: exact one-step sampling of the
//! linear SDE, OU or deterministic-plus-noise quadratures, and sampled
//! shot-noise photocurrents.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::linalg::psd_sqrt;
use crate::riccati::solve_discrete_lyapunov;
use crate::sensor::{build_model, frame_rotation, ModelVariant, SensorParams};

/// One piece of a stepped/chirped sine: on `[start, start + duration)`,
/// `q̄(t) = amplitude · sin(phase + 2π(freq_hz·τ + chirp·τ²/2))`, `τ = t − start`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineSegment {
    pub start: f64,
    pub duration: f64,
    pub amplitude: f64,
    pub freq_hz: f64,
    /// Hz/s
    pub chirp: f64,
    pub phase: f64,
}

impl SineSegment {
    fn value(&self, t: f64) -> (f64, f64) {
        let tau = t - self.start;
        let two_pi = 2.0 * core::f64::consts::PI;
        let arg = self.phase + two_pi * (self.freq_hz * tau + 0.5 * self.chirp * tau * tau);
        let (s, c) = arg.sin_cos();
        let rate = two_pi * (self.freq_hz + self.chirp * tau);
        (self.amplitude * s, self.amplitude * c * rate)
    }
}

/// What the lab-frame quadratures do.
#[derive(Debug, Clone, PartialEq)]
pub enum WaveformKind {
    /// Independent OU quadratures with decay `kappa`.
    Ou { kappa: f64 },
    /// `q` follows a sum of consecutive sine segments; `p̄ = 0`.
    SteppedSine { segments: Vec<SineSegment> },
    /// `q̄` is constant on consecutive intervals; `p̄ = 0`.
    PiecewiseConstant { levels: Vec<f64>, durations: Vec<f64> },
}

/// Quadrature process: `kind` plus white noise of intensity
/// `additive_noise_rate` on each quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformSpec {
    pub kind: WaveformKind,
    pub additive_noise_rate: f64,
}

impl WaveformSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.additive_noise_rate >= 0.0) || !self.additive_noise_rate.is_finite() {
            return Err(invalid("noise rate must be non-negative"));
        }
        match &self.kind {
            WaveformKind::Ou { kappa } => {
                if !(*kappa >= 0.0) || !kappa.is_finite() {
                    return Err(invalid("OU kappa must be non-negative"));
                }
            }
            WaveformKind::SteppedSine { segments } => {
                if segments.is_empty() {
                    return Err(invalid("need at least one segment"));
                }
                for s in segments {
                    let vals = [s.start, s.duration, s.amplitude, s.freq_hz, s.chirp, s.phase];
                    if !(s.duration > 0.0) || vals.iter().any(|v| !v.is_finite()) {
                        return Err(invalid("segments need finite values and positive durations"));
                    }
                }
            }
            WaveformKind::PiecewiseConstant { levels, durations } => {
                if levels.is_empty() || levels.len() != durations.len() {
                    return Err(invalid("levels and durations must be non-empty and equal length"));
                }
                if durations.iter().any(|d| !(*d > 0.0) || !d.is_finite())
                    || levels.iter().any(|v| !v.is_finite())
                {
                    return Err(invalid("durations must be positive, levels finite"));
                }
            }
        }
        Ok(())
    }

    /// Break points of the deterministic part, sorted.
    fn breakpoints(&self) -> Vec<f64> {
        match &self.kind {
            WaveformKind::Ou { .. } => Vec::new(),
            WaveformKind::SteppedSine { segments } => {
                let mut b: Vec<f64> = segments.iter().map(|s| s.start).collect();
                b.sort_by(|x, y| x.partial_cmp(y).unwrap());
                b
            }
            WaveformKind::PiecewiseConstant { durations, .. } => {
                let mut acc = 0.0;
                durations
                    .iter()
                    .map(|d| {
                        let s = acc;
                        acc += d;
                        s
                    })
                    .collect()
            }
        }
    }
}

/// Deterministic quadrature `q̄(t)` and its derivative.
#[derive(Debug, Clone)]
pub struct DeterministicWaveform {
    segments: Vec<SineSegment>,
}

impl DeterministicWaveform {
    /// Builds the segment list and checks that it covers `[t0, t_end]`.
    pub fn new(kind: &WaveformKind, t0: f64, t_end: f64) -> Result<Self> {
        let mut segments = match kind {
            WaveformKind::Ou { .. } => return Err(invalid("OU waveforms have no deterministic part")),
            WaveformKind::SteppedSine { segments } => segments.clone(),
            WaveformKind::PiecewiseConstant { levels, durations } => {
                let mut acc = 0.0;
                levels
                    .iter()
                    .zip(durations)
                    .map(|(l, d)| {
                        let s = SineSegment {
                            start: acc,
                            duration: *d,
                            amplitude: *l,
                            freq_hz: 0.0,
                            chirp: 0.0,
                            phase: core::f64::consts::FRAC_PI_2,
                        };
                        acc += d;
                        s
                    })
                    .collect()
            }
        };
        segments.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
        let tol = 1e-9 * (t_end.abs() + 1e-3);
        if segments[0].start > t0 + tol {
            return Err(invalid("segments start after the run begins"));
        }
        for w in segments.windows(2) {
            if w[1].start > w[0].start + w[0].duration + tol {
                return Err(invalid("gap between waveform segments"));
            }
        }
        let last = segments.last().unwrap();
        let end = segments
            .iter()
            .map(|s| s.start + s.duration)
            .fold(f64::NEG_INFINITY, f64::max);
        if end < t_end - tol || last.start + last.duration < t_end - tol {
            return Err(invalid("segments end before the run does"));
        }
        Ok(DeterministicWaveform { segments })
    }

    fn segment(&self, t: f64) -> &SineSegment {
        let idx = self.segments.partition_point(|s| s.start <= t);
        &self.segments[idx.saturating_sub(1)]
    }

    /// `(q̄(t), q̄̇(t))`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        self.segment(t).value(t)
    }
}

/// `(q̄_k, q̄̇_k)` on the grid `t_k = kΔ`.
pub fn synthesize_unknown_waveform(
    kind: &WaveformKind,
    n_steps: usize,
    delta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_steps == 0 || !(delta > 0.0) {
        return Err(invalid("need n_steps ≥ 1 and delta > 0"));
    }
    let w = DeterministicWaveform::new(kind, 0.0, (n_steps - 1) as f64 * delta)?;
    Ok((0..n_steps).map(|k| w.eval(k as f64 * delta)).unzip())
}

/// Sampled ground truth. `states[k] = [J_y, J_z, q, p]` in the lab frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<[f64; 4]>,
    pub observations: Vec<f64>,
    /// `E(t_k) = g_P (q cos ω_P t + p sin ω_P t)`.
    pub waveform: Vec<f64>,
    /// `q̄(t_k)` for deterministic waveforms.
    pub signal_mean: Option<Vec<f64>>,
    /// `q̄̇(t_k)` for deterministic waveforms.
    pub signal_rate: Option<Vec<f64>>,
    pub seed: u64,
    pub params: SensorParams,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Starting point of a simulation.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitialState {
    /// Draw from the stationary distribution where one exists; quadrature
    /// components without one start at their deterministic value.
    #[default]
    Stationary,
    /// Start at the given lab state `[J_y, J_z, q, p]` (for deterministic
    /// waveforms `q, p` are offsets from `q̄`).
    Fixed([f64; 4]),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimOptions {
    pub initial: InitialState,
}

/// Simulates `n_steps` samples with stationary initial conditions.
pub fn simulate(
    params: &SensorParams,
    spec: &WaveformSpec,
    n_steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    simulate_with(params, spec, n_steps, seed, &SimOptions::default())
}

// Eight-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329_0,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362_0,
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// `∫_{a}^{b} e^{F_J (b − s)} e_z g_P q̄(s) cos(ω_P s) ds` for the spin block.
fn forced_spin_response(
    params: &SensorParams,
    wave: &DeterministicWaveform,
    breaks: &[f64],
    a: f64,
    b: f64,
) -> [f64; 2] {
    let mut pts = Vec::with_capacity(4);
    pts.push(a);
    for &x in breaks {
        if x > a && x < b {
            pts.push(x);
        }
    }
    pts.push(b);
    let gamma = 1.0 / params.t2;
    let mut out = [0.0; 2];
    for w in pts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            let s = mid + half * x;
            let tau = b - s;
            let (qbar, _) = wave.eval(s);
            let drive = params.g_p * qbar * (params.omega_p * s).cos();
            let decay = (-gamma * tau).exp();
            let (sn, cs) = (params.omega_l * tau).sin_cos();
            // Second column of e^{F_J τ} = e^{−γτ} [[c, s], [−s, c]].
            out[0] += wt * half * decay * sn * drive;
            out[1] += wt * half * decay * cs * drive;
        }
    }
    out
}

fn gaussian_vector(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Simulation with explicit options.
///
/// The state is propagated exactly in the rotating frame: `[J_y, J_z, q̄, p̄]`
/// for OU quadratures, or `[J_y, J_z, n̄_q, n̄_p]` for deterministic waveforms
/// where `n` is the accumulated quadrature noise and `q = q̄ + n`. Random
/// draws per step: the process noise vector, then the observation noise.
pub fn simulate_with(
    params: &SensorParams,
    spec: &WaveformSpec,
    n_steps: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    params.validate()?;
    spec.validate()?;
    if n_steps == 0 {
        return Err(invalid("n_steps must be at least 1"));
    }
    let delta = params.delta;
    let t_end = (n_steps - 1) as f64 * delta;
    let (kappa, wave) = match &spec.kind {
        WaveformKind::Ou { kappa } => (*kappa, None),
        kind => (0.0, Some(DeterministicWaveform::new(kind, 0.0, t_end)?)),
    };
    let breaks = spec.breakpoints();
    let truth = SensorParams {
        q_q: spec.additive_noise_rate,
        q_p: spec.additive_noise_rate,
        kappa_q: kappa,
        kappa_p: kappa,
        ..*params
    };
    let rf = build_model(&truth, ModelVariant::RotatingFrame)?;
    let prop = rf.propagator(0.0, delta)?;
    let phi = prop.phi;
    let chol = psd_sqrt(&prop.q_delta);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut x = match &opts.initial {
        InitialState::Fixed(v) => {
            frame_rotation(4, 0.0, params.omega_p)? * DVector::from_column_slice(v)
        }
        InitialState::Stationary => stationary_draw(&phi, &prop.q_delta, kappa, &mut rng)?,
    };

    let r_std = params.r_delta().sqrt();
    let mut out = Trajectory {
        times: Vec::with_capacity(n_steps),
        states: Vec::with_capacity(n_steps),
        observations: Vec::with_capacity(n_steps),
        waveform: Vec::with_capacity(n_steps),
        signal_mean: wave.as_ref().map(|_| Vec::with_capacity(n_steps)),
        signal_rate: wave.as_ref().map(|_| Vec::with_capacity(n_steps)),
        seed,
        params: *params,
    };
    for k in 0..n_steps {
        let t = k as f64 * delta;
        if k > 0 {
            let t_prev = (k - 1) as f64 * delta;
            let noise = &chol * gaussian_vector(&mut rng, 4);
            x = &phi * &x + noise;
            if let Some(w) = &wave {
                let f = forced_spin_response(params, w, &breaks, t_prev, t);
                x[0] += f[0];
                x[1] += f[1];
            }
        }
        let (s, c) = (params.omega_p * t).sin_cos();
        // lab = Rᵀ · rotating
        let mut q = c * x[2] - s * x[3];
        let p = s * x[2] + c * x[3];
        if let Some(w) = &wave {
            let (qbar, rate) = w.eval(t);
            q += qbar;
            out.signal_mean.as_mut().unwrap().push(qbar);
            out.signal_rate.as_mut().unwrap().push(rate);
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        out.times.push(t);
        out.states.push([x[0], x[1], q, p]);
        out.waveform.push(params.g_p * (q * c + p * s));
        out.observations.push(params.g_d * x[1] + r_std * e);
    }
    Ok(out)
}

fn stationary_draw(
    phi: &DMatrix<f64>,
    q_delta: &DMatrix<f64>,
    kappa: f64,
    rng: &mut ChaCha20Rng,
) -> Result<DVector<f64>> {
    let cov = if kappa > 0.0 {
        solve_discrete_lyapunov(phi, q_delta)?
    } else {
        // Quadrature noise has no stationary law; start it at zero and draw
        // the spins from their own stationary law.
        let phi_j = phi.view((0, 0), (2, 2)).into_owned();
        let q_j = q_delta.view((0, 0), (2, 2)).into_owned();
        let sj = solve_discrete_lyapunov(&phi_j, &q_j)?;
        let mut c = DMatrix::zeros(4, 4);
        c.view_mut((0, 0), (2, 2)).copy_from(&sj);
        c
    };
    Ok(psd_sqrt(&cov) * gaussian_vector(rng, 4))
}

/// Per-run seeds: `seed_0 = base`, `seed_i = splitmix64(base + i·γ)` with
/// `γ = 0x9E3779B97F4A7C15`.
pub fn replicate(runs: usize, base_seed: u64) -> Result<Vec<u64>> {
    if runs == 0 {
        return Err(invalid("runs must be at least 1"));
    }
    const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
    Ok((0..runs as u64)
        .map(|i| {
            if i == 0 {
                base_seed
            } else {
                splitmix64(base_seed.wrapping_add(i.wrapping_mul(GAMMA)))
            }
        })
        .collect())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
