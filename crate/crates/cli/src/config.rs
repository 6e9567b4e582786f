//! TOML experiment configuration.

use std::f64::consts::PI;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use atomsense_core::linear_model::TimeOrdering;
use atomsense_core::sensor::{
    Frame, ModelVariant, PhysicsConstants, SensorParams, faraday_transduction, LAB_LINEWIDTH_HZ,
    LAB_S_AT, LAB_S_PH,
};
use atomsense_core::simulator::{SineSegment, WaveformKind, WaveformSpec};
use atomsense_core::spectroscopy::Window;

/// Whole experiment file. Every section is optional and falls back to the
/// lab operating point.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sensor: SensorConfig,
    pub waveform: WaveformConfig,
    pub run: RunConfig,
    pub model: ModelConfig,
    pub unknown: UnknownConfig,
    pub thresholds: Thresholds,
    pub spectroscopy: SpectroscopyConfig,
    /// Explicit discrete model for `steady-state`; overrides the sensor model.
    pub discrete: Option<DiscreteConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    #[serde(alias = "omega_L_hz")]
    pub larmor_hz: f64,
    #[serde(alias = "omega_p_hz")]
    pub pump_hz: f64,
    /// `1/(2πT₂)`
    pub linewidth_hz: f64,
    /// Overrides `linewidth_hz`.
    pub t2_s: Option<f64>,
    /// Pump coupling, spins per second per unit quadrature.
    pub g_p: f64,
    /// Faraday transduction, A per spin. Computed from the optical constants when absent.
    pub g_d: Option<f64>,
    /// Lorentzian height of the spin-noise spectrum, A²/Hz.
    pub s_at: f64,
    /// Shot-noise floor `R`, A²/Hz.
    #[serde(alias = "r_psd")]
    pub s_ph: f64,
    /// Spin-noise rates; derived from `s_at` when absent.
    pub q_y: Option<f64>,
    pub q_z: Option<f64>,
    #[serde(alias = "delta_s")]
    pub delta: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            larmor_hz: 1e4,
            pump_hz: 1e4,
            linewidth_hz: LAB_LINEWIDTH_HZ,
            t2_s: None,
            g_p: 4e12,
            g_d: None,
            s_at: LAB_S_AT,
            s_ph: LAB_S_PH,
            q_y: None,
            q_z: None,
            delta: 5e-6,
        }
    }
}

impl SensorConfig {
    /// Sensor parameters with the quadrature noise and decay left at zero.
    pub fn params(&self) -> Result<SensorParams> {
        let g_d = match self.g_d {
            Some(g) => g,
            None => faraday_transduction(&PhysicsConstants::lab_defaults())?,
        };
        let t2 = self.t2_s.unwrap_or(1.0 / (2.0 * PI * self.linewidth_hz));
        let q_j = 2.0 * self.s_at / (t2 * t2 * g_d * g_d);
        let p = SensorParams {
            omega_l: 2.0 * PI * self.larmor_hz,
            t2,
            g_p: self.g_p,
            omega_p: 2.0 * PI * self.pump_hz,
            g_d,
            q_y: self.q_y.unwrap_or(q_j),
            q_z: self.q_z.unwrap_or(q_j),
            q_q: 0.0,
            q_p: 0.0,
            kappa_q: 0.0,
            kappa_p: 0.0,
            r: self.s_ph,
            delta: self.delta,
        };
        p.validate().context("invalid [sensor] section")?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub start: f64,
    pub duration: f64,
    pub amplitude: f64,
    pub freq_hz: f64,
    #[serde(default)]
    pub chirp: f64,
    #[serde(default)]
    pub phase: f64,
}

impl From<SegmentConfig> for SineSegment {
    fn from(s: SegmentConfig) -> Self {
        SineSegment {
            start: s.start,
            duration: s.duration,
            amplitude: s.amplitude,
            freq_hz: s.freq_hz,
            chirp: s.chirp,
            phase: s.phase,
        }
    }
}

/// Quadrature waveform driving the simulated sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WaveformConfig {
    Ou {
        kappa: f64,
        noise_rate: f64,
    },
    SteppedSine {
        segments: Vec<SegmentConfig>,
        #[serde(default)]
        noise_rate: f64,
    },
    PiecewiseConstant {
        levels: Vec<f64>,
        durations: Vec<f64>,
        #[serde(default)]
        noise_rate: f64,
    },
}

impl Default for WaveformConfig {
    fn default() -> Self {
        WaveformConfig::Ou {
            kappa: 100.0,
            noise_rate: 200.0,
        }
    }
}

impl WaveformConfig {
    pub fn spec(&self) -> Result<WaveformSpec> {
        let spec = match self {
            WaveformConfig::Ou { kappa, noise_rate } => WaveformSpec {
                kind: WaveformKind::Ou { kappa: *kappa },
                additive_noise_rate: *noise_rate,
            },
            WaveformConfig::SteppedSine {
                segments,
                noise_rate,
            } => WaveformSpec {
                kind: WaveformKind::SteppedSine {
                    segments: segments.iter().map(|s| (*s).into()).collect(),
                },
                additive_noise_rate: *noise_rate,
            },
            WaveformConfig::PiecewiseConstant {
                levels,
                durations,
                noise_rate,
            } => WaveformSpec {
                kind: WaveformKind::PiecewiseConstant {
                    levels: levels.clone(),
                    durations: durations.clone(),
                },
                additive_noise_rate: *noise_rate,
            },
        };
        spec.validate().context("invalid [waveform] section")?;
        Ok(spec)
    }

    /// Quadrature decay rate and noise rate the matched model should use.
    pub fn model_noise(&self) -> (f64, f64) {
        match self {
            WaveformConfig::Ou { kappa, noise_rate } => (*kappa, *noise_rate),
            WaveformConfig::SteppedSine { noise_rate, .. }
            | WaveformConfig::PiecewiseConstant { noise_rate, .. } => (0.0, *noise_rate),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_steps: usize,
    pub n_runs: usize,
    pub seed: u64,
    /// Samples inside this initial window are left out of the headline
    /// statistics; defaults to `5·T₂`.
    pub transient: Option<f64>,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_steps: 3000,
            n_runs: 10,
            seed: 1,
            transient: None,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    KnownOu,
    RotatingFrame,
    WienerProcess,
    Polynomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameName {
    Lab,
    Rotating,
}

impl From<FrameName> for Frame {
    fn from(f: FrameName) -> Self {
        match f {
            FrameName::Lab => Frame::Lab,
            FrameName::Rotating => Frame::Rotating,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingName {
    Midpoint,
    Magnus4,
    Magnus6,
}

impl From<OrderingName> for TimeOrdering {
    fn from(o: OrderingName) -> Self {
        match o {
            OrderingName::Midpoint => TimeOrdering::Midpoint,
            OrderingName::Magnus4 => TimeOrdering::Magnus4,
            OrderingName::Magnus6 => TimeOrdering::Magnus6,
        }
    }
}

/// Filter model used by `filter`, `steady-state` and `experiment-ou`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: VariantName,
    pub frame: FrameName,
    /// Derivative order of the polynomial model.
    pub order: usize,
    /// Quadrature noise rate for the Wiener-process and polynomial models.
    /// The OU models take theirs from `[waveform]`.
    pub q: f64,
    pub substeps: usize,
    pub time_ordering: OrderingName,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: VariantName::RotatingFrame,
            frame: FrameName::Rotating,
            order: 2,
            q: 1e-4,
            substeps: atomsense_core::linear_model::DEFAULT_SUBSTEPS,
            time_ordering: OrderingName::Magnus6,
        }
    }
}

impl ModelConfig {
    pub fn variant(&self) -> ModelVariant {
        match self.variant {
            VariantName::KnownOu => ModelVariant::KnownOu,
            VariantName::RotatingFrame => ModelVariant::RotatingFrame,
            VariantName::WienerProcess => ModelVariant::WienerProcess {
                frame: self.frame.into(),
            },
            VariantName::Polynomial => ModelVariant::Polynomial {
                order: self.order,
                frame: self.frame.into(),
            },
        }
    }

    /// Filter-side parameters: the sensor plus the quadrature prior implied
    /// by the variant.
    pub fn filter_params(&self, sensor: &SensorParams, waveform: &WaveformConfig) -> SensorParams {
        let (kappa, q) = match self.variant {
            VariantName::KnownOu | VariantName::RotatingFrame => waveform.model_noise(),
            VariantName::WienerProcess | VariantName::Polynomial => (0.0, self.q),
        };
        SensorParams {
            q_q: q,
            q_p: q,
            kappa_q: kappa,
            kappa_p: kappa,
            ..*sensor
        }
    }
}

/// Surrogate for an unpublished deterministic drive, tracked by a
/// Wiener-process and a polynomial model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnknownConfig {
    pub segments: Vec<SegmentConfig>,
    pub n_steps: usize,
    pub n_runs: usize,
    pub seed: u64,
    pub frame: FrameName,
    pub q_wp: f64,
    pub q_pm: f64,
    pub pm_order: usize,
    /// Leading samples dropped before averaging, seconds.
    pub transient: f64,
}

impl Default for UnknownConfig {
    fn default() -> Self {
        UnknownConfig {
            segments: default_surrogate(),
            n_steps: 3000,
            n_runs: 6,
            seed: 7,
            frame: FrameName::Rotating,
            q_wp: 1.0,
            q_pm: 1e-4,
            pm_order: 2,
            transient: 0.0,
        }
    }
}

/// Three 5 ms sine pieces: amplitude and phase steps plus a chirp.
pub fn default_surrogate() -> Vec<SegmentConfig> {
    vec![
        SegmentConfig {
            start: 0.0,
            duration: 0.005,
            amplitude: 1.0,
            freq_hz: 200.0,
            chirp: 0.0,
            phase: 0.0,
        },
        SegmentConfig {
            start: 0.005,
            duration: 0.005,
            amplitude: 0.5,
            freq_hz: 400.0,
            chirp: 0.0,
            phase: 1.0,
        },
        SegmentConfig {
            start: 0.010,
            duration: 0.005,
            amplitude: 1.5,
            freq_hz: 300.0,
            chirp: 2e4,
            phase: 2.5,
        },
    ]
}

impl UnknownConfig {
    pub fn spec(&self) -> Result<WaveformSpec> {
        let spec = WaveformSpec {
            kind: WaveformKind::SteppedSine {
                segments: self.segments.iter().map(|s| (*s).into()).collect(),
            },
            additive_noise_rate: 0.0,
        };
        spec.validate().context("invalid [unknown] section")?;
        Ok(spec)
    }
}

/// Pass/fail bounds applied by `experiment-ou`, `validate` and `spectroscopy`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub coverage: [f64; 2],
    pub nis_mean: [f64; 2],
    /// Relative tolerance on the late-time innovation variance against `S_ss`.
    pub innovation_variance: f64,
    /// Samples at the end of each run used for the innovation variance.
    pub innovation_window: usize,
    /// Relative distance of the final covariance from the DARE solution.
    pub steady_state: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            coverage: [0.92, 0.97],
            nis_mean: [0.93, 1.07],
            innovation_variance: 0.05,
            innovation_window: 2000,
            steady_state: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowName {
    Hann,
    Rectangular,
}

impl From<WindowName> for Window {
    fn from(w: WindowName) -> Self {
        match w {
            WindowName::Hann => Window::Hann,
            WindowName::Rectangular => Window::Rectangular,
        }
    }
}

/// Signal-free calibration run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectroscopyConfig {
    pub n_steps: usize,
    pub segment_len: usize,
    pub window: WindowName,
    pub band_hz: [f64; 2],
    pub seed: u64,
    /// Fresh samples used to check the rebuilt filter.
    pub check_steps: usize,
    pub nis_mean: [f64; 2],
    /// Allowed relative error of linewidth and `S_ph/S_at` against the sensor section.
    pub rel_tol: f64,
}

impl Default for SpectroscopyConfig {
    fn default() -> Self {
        SpectroscopyConfig {
            n_steps: 4_000_000,
            segment_len: 16384,
            window: WindowName::Hann,
            band_hz: [8000.0, 12000.0],
            seed: 11,
            check_steps: 20000,
            nis_mean: [0.85, 1.15],
            rel_tol: 0.10,
        }
    }
}

/// `x_{k+1} = Φx_k + w`, `z = Hx + v` with explicit per-step covariances.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteConfig {
    pub phi: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn check(&self) -> Result<()> {
        if self.run.n_runs == 0 || self.unknown.n_runs == 0 {
            bail!("n_runs must be at least 1");
        }
        if self.run.n_steps < 2 || self.unknown.n_steps < 2 {
            bail!("n_steps must be at least 2");
        }
        if self.model.substeps == 0 {
            bail!("model.substeps must be at least 1");
        }
        for (name, [lo, hi]) in [
            ("thresholds.coverage", self.thresholds.coverage),
            ("thresholds.nis_mean", self.thresholds.nis_mean),
            ("spectroscopy.nis_mean", self.spectroscopy.nis_mean),
            ("spectroscopy.band_hz", self.spectroscopy.band_hz),
        ] {
            if !(lo <= hi) {
                bail!("{name} must be [low, high]");
            }
        }
        self.sensor.params()?;
        self.waveform.spec()?;
        self.unknown.spec()?;
        Ok(())
    }

    /// Initial window excluded from headline statistics, in samples.
    pub fn transient_samples(&self) -> Result<usize> {
        let p = self.sensor.params()?;
        let dur = self.run.transient.unwrap_or(5.0 * p.t2);
        Ok(atomsense_core::validation::transient_samples(dur, p.delta))
    }
}
