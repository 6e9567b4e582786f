//! State-space models of the Faraday-rotation atomic sensor and the physics
//! helpers that turn lab constants into model coefficients.
//!
//! State ordering is `[J_y, J_z | q, p | q̇, ṗ | q̈, p̈ | …]`: two spin
//! components followed by one `(q, p)` pair per modelled derivative of the
//! quadratures. The driving waveform is `E(t) = g_P (q cos ω_P t + p sin ω_P t)`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{dim_mismatch, invalid, Result};
use crate::filter::GaussianBelief;
use crate::linear_model::LinearModel;
use crate::spectroscopy::PsdFit;

/// Speed of light in cm/s.
pub const SPEED_OF_LIGHT_CM: f64 = 2.997_924_58e10;

/// Reference slope of the lab linear-response calibration, in nA per mA of
/// pump modulation current. Not used as a default anywhere.
pub const REFERENCE_RESPONSE_SLOPE_NA_PER_MA: f64 = 106.4;

/// Numerical parameters of the sensor model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorParams {
    /// Larmor frequency, rad/s.
    pub omega_l: f64,
    /// Transverse coherence time, s.
    pub t2: f64,
    /// Pump coupling: spin units per second per quadrature unit.
    pub g_p: f64,
    /// Pump carrier, rad/s.
    pub omega_p: f64,
    /// Detection transduction, A per spin unit.
    pub g_d: f64,
    pub q_y: f64,
    pub q_z: f64,
    pub q_q: f64,
    pub q_p: f64,
    pub kappa_q: f64,
    pub kappa_p: f64,
    /// Shot-noise intensity, A²/Hz.
    pub r: f64,
    /// Sampling period, s.
    pub delta: f64,
}

/// Spin-noise spectrum of the lab sensor: Lorentzian height and floor, A²/Hz.
pub const LAB_S_AT: f64 = 118.7e-24;
pub const LAB_S_PH: f64 = 96.0e-24;
/// Spin-noise linewidth `1/(2πT₂)`, Hz.
pub const LAB_LINEWIDTH_HZ: f64 = 182.0;

impl SensorParams {
    /// Lab operating point with the drive switched off: `ω_L = ω_P = 2π·10 kHz`,
    /// `1/(2πT₂) = 182 Hz`, `κ = 100 s⁻¹`, `Δ = 5 µs`, `g_D` from
    /// [`PhysicsConstants::lab_defaults`] and spin/shot noise from the lab
    /// spin-noise spectrum via [`spin_noise_rates`]. `g_p`, `q_q` and `q_p`
    /// are zero and must be set per experiment.
    pub fn lab_defaults() -> Self {
        let two_pi = 2.0 * core::f64::consts::PI;
        let t2 = 1.0 / (two_pi * LAB_LINEWIDTH_HZ);
        let phys = PhysicsConstants::lab_defaults();
        let g_d = 2.0 * phys.responsivity * phys.power * phys.geometric() / phys.detuning;
        let q_j = 2.0 * LAB_S_AT / (t2 * t2 * g_d * g_d);
        SensorParams {
            omega_l: two_pi * 1e4,
            t2,
            g_p: 0.0,
            omega_p: two_pi * 1e4,
            g_d,
            q_y: q_j,
            q_z: q_j,
            q_q: 0.0,
            q_p: 0.0,
            kappa_q: 100.0,
            kappa_p: 100.0,
            r: LAB_S_PH,
            delta: 5e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.omega_l,
            self.t2,
            self.g_p,
            self.omega_p,
            self.g_d,
            self.q_y,
            self.q_z,
            self.q_q,
            self.q_p,
            self.kappa_q,
            self.kappa_p,
            self.r,
            self.delta,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid("sensor parameters must be finite"));
        }
        if !(self.t2 > 0.0) || !(self.delta > 0.0) || !(self.r > 0.0) {
            return Err(invalid("T2, delta and R must be positive"));
        }
        if [self.q_y, self.q_z, self.q_q, self.q_p, self.kappa_q, self.kappa_p]
            .iter()
            .any(|v| *v < 0.0)
        {
            return Err(invalid("noise rates and decay rates must be non-negative"));
        }
        if self.g_d == 0.0 {
            return Err(invalid("g_D must be nonzero"));
        }
        Ok(())
    }

    /// Per-sample observation noise variance `R/Δ`.
    pub fn r_delta(&self) -> f64 {
        self.r / self.delta
    }
}

/// Coordinates for the quadrature block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Frame {
    #[default]
    Lab,
    /// Co-rotating with the pump carrier at `ω_P`.
    Rotating,
}

/// Which dynamics the quadratures are assumed to follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Ornstein-Uhlenbeck quadratures, lab frame (time-varying `F`).
    KnownOu,
    /// Ornstein-Uhlenbeck quadratures in the rotating frame (time-invariant);
    /// needs `Q_q = Q_p` and `κ_q = κ_p`.
    RotatingFrame,
    /// `dq = dw`.
    WienerProcess { frame: Frame },
    /// Quadratures and their first `order` derivatives; noise on the top one.
    Polynomial { order: usize, frame: Frame },
}

impl ModelVariant {
    /// The accelerations model (`order = 2`).
    pub fn polynomial_l2(frame: Frame) -> Self {
        ModelVariant::Polynomial { order: 2, frame }
    }

    pub fn frame(&self) -> Frame {
        match self {
            ModelVariant::KnownOu => Frame::Lab,
            ModelVariant::RotatingFrame => Frame::Rotating,
            ModelVariant::WienerProcess { frame } | ModelVariant::Polynomial { frame, .. } => *frame,
        }
    }

    /// Highest quadrature derivative carried in the state.
    pub fn order(&self) -> usize {
        match self {
            ModelVariant::Polynomial { order, .. } => *order,
            _ => 0,
        }
    }

    pub fn dim_x(&self) -> usize {
        2 + 2 * (self.order() + 1)
    }
}

struct Layout {
    levels: usize,
    kappa: (f64, f64),
    frame: Frame,
}

fn drift(params: &SensorParams, layout: &Layout, t: f64) -> DMatrix<f64> {
    let n = 2 + 2 * layout.levels;
    let mut f = DMatrix::zeros(n, n);
    let decay = 1.0 / params.t2;
    f[(0, 0)] = -decay;
    f[(0, 1)] = params.omega_l;
    f[(1, 0)] = -params.omega_l;
    f[(1, 1)] = -decay;
    match layout.frame {
        Frame::Lab => {
            let (s, c) = (params.omega_p * t).sin_cos();
            f[(1, 2)] = params.g_p * c;
            f[(1, 3)] = params.g_p * s;
        }
        Frame::Rotating => {
            f[(1, 2)] = params.g_p;
        }
    }
    for level in 0..layout.levels {
        let i = 2 + 2 * level;
        if level == 0 {
            f[(i, i)] = -layout.kappa.0;
            f[(i + 1, i + 1)] = -layout.kappa.1;
        }
        if layout.frame == Frame::Rotating {
            f[(i, i + 1)] = params.omega_p;
            f[(i + 1, i)] = -params.omega_p;
        }
        if level + 1 < layout.levels {
            f[(i, i + 2)] = 1.0;
            f[(i + 1, i + 3)] = 1.0;
        }
    }
    f
}

/// Assembles the linear model for `variant`.
pub fn build_model(params: &SensorParams, variant: ModelVariant) -> Result<LinearModel> {
    params.validate()?;
    let frame = variant.frame();
    let order = variant.order();
    let kappa = match variant {
        ModelVariant::KnownOu | ModelVariant::RotatingFrame => (params.kappa_q, params.kappa_p),
        _ => (0.0, 0.0),
    };
    if frame == Frame::Rotating {
        if params.q_q != params.q_p {
            return Err(invalid("rotating-frame model requires Q_q = Q_p"));
        }
        if kappa.0 != kappa.1 {
            return Err(invalid("rotating-frame model requires kappa_q = kappa_p"));
        }
    }
    let layout = Layout {
        levels: order + 1,
        kappa,
        frame,
    };
    let n = variant.dim_x();
    let top_scale = params.delta.powi(2 * order as i32);
    let mut qdiag = DVector::zeros(n);
    qdiag[0] = params.q_y;
    qdiag[1] = params.q_z;
    qdiag[n - 2] = params.q_q / top_scale;
    qdiag[n - 1] = params.q_p / top_scale;
    let q = DMatrix::from_diagonal(&qdiag);
    let mut h = DMatrix::zeros(1, n);
    h[(0, 1)] = params.g_d;
    let r = DMatrix::from_element(1, 1, params.r_delta());
    let time_varying = frame == Frame::Lab && params.g_p != 0.0 && params.omega_p != 0.0;
    if time_varying {
        let p = *params;
        let model = LinearModel::time_varying(n, move |t| drift(&p, &layout, t), q, h, r, params.delta)?;
        model.with_period(2.0 * core::f64::consts::PI / params.omega_p.abs())
    } else {
        LinearModel::new(drift(params, &layout, 0.0), q, h, r, params.delta)
    }
}

/// Direction of [`to_rotating_frame`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToRotating,
    ToLab,
}

/// `R^{(q,J)}_{ω_P t}`: identity on the spins, `[[c, s], [−s, c]]` on every
/// quadrature pair.
pub fn frame_rotation(dim_x: usize, t: f64, omega_p: f64) -> Result<DMatrix<f64>> {
    if dim_x < 4 || !dim_x.is_multiple_of(2) {
        return Err(dim_mismatch("state must be two spins plus quadrature pairs"));
    }
    let (s, c) = (omega_p * t).sin_cos();
    let mut m = DMatrix::identity(dim_x, dim_x);
    for i in (2..dim_x).step_by(2) {
        m[(i, i)] = c;
        m[(i, i + 1)] = s;
        m[(i + 1, i)] = -s;
        m[(i + 1, i + 1)] = c;
    }
    Ok(m)
}

/// Objects that can be moved between frames.
pub trait FrameTransform: Sized {
    fn transform(&self, rotation: &DMatrix<f64>) -> Result<Self>;
    fn state_dim(&self) -> usize;
}

impl FrameTransform for DVector<f64> {
    fn transform(&self, rotation: &DMatrix<f64>) -> Result<Self> {
        Ok(rotation * self)
    }
    fn state_dim(&self) -> usize {
        self.len()
    }
}

/// Matrices are treated as covariances (congruence transform).
impl FrameTransform for DMatrix<f64> {
    fn transform(&self, rotation: &DMatrix<f64>) -> Result<Self> {
        if !self.is_square() {
            return Err(dim_mismatch("covariance must be square"));
        }
        Ok(rotation * self * rotation.transpose())
    }
    fn state_dim(&self) -> usize {
        self.nrows()
    }
}

impl FrameTransform for GaussianBelief {
    fn transform(&self, rotation: &DMatrix<f64>) -> Result<Self> {
        Ok(GaussianBelief {
            mean: self.mean.transform(rotation)?,
            cov: self.cov.transform(rotation)?,
            t: self.t,
            stage: self.stage,
        })
    }
    fn state_dim(&self) -> usize {
        self.mean.len()
    }
}

/// Moves a state vector, covariance or belief between lab and rotating frames.
pub fn to_rotating_frame<T: FrameTransform>(
    x: &T,
    t: f64,
    omega_p: f64,
    direction: Direction,
) -> Result<T> {
    let rot = frame_rotation(x.state_dim(), t, omega_p)?;
    match direction {
        Direction::ToRotating => x.transform(&rot),
        Direction::ToLab => x.transform(&rot.transpose()),
    }
}

/// Waveform estimate `Ê` and its variance at time `t` from a sensor belief.
pub fn waveform_estimate(
    belief: &GaussianBelief,
    params: &SensorParams,
    frame: Frame,
    t: f64,
) -> Result<(f64, f64)> {
    if belief.mean.len() < 4 {
        return Err(dim_mismatch("belief lacks a quadrature block"));
    }
    let v = match frame {
        Frame::Lab => {
            let (s, c) = (params.omega_p * t).sin_cos();
            [c, s]
        }
        Frame::Rotating => [1.0, 0.0],
    };
    let m = &belief.mean;
    let e = params.g_p * (v[0] * m[2] + v[1] * m[3]);
    let c = &belief.cov;
    let var = params.g_p
        * params.g_p
        * (v[0] * v[0] * c[(2, 2)] + 2.0 * v[0] * v[1] * c[(2, 3)] + v[1] * v[1] * c[(3, 3)]);
    Ok((e, var.max(0.0)))
}

/// Lab-frame estimate of the quadrature pair at derivative `level`, as
/// `([q, p], 2×2 covariance)`.
pub fn quadrature_estimate(
    belief: &GaussianBelief,
    params: &SensorParams,
    frame: Frame,
    level: usize,
    t: f64,
) -> Result<([f64; 2], [[f64; 2]; 2])> {
    let i = 2 + 2 * level;
    if belief.mean.len() < i + 2 {
        return Err(dim_mismatch("belief does not carry that derivative"));
    }
    let mut mean = [belief.mean[i], belief.mean[i + 1]];
    let c = &belief.cov;
    let mut cov = [[c[(i, i)], c[(i, i + 1)]], [c[(i + 1, i)], c[(i + 1, i + 1)]]];
    if frame == Frame::Rotating {
        // lab = Rᵀ · rotating
        let (s, co) = (params.omega_p * t).sin_cos();
        let rt = [[co, -s], [s, co]];
        mean = [
            rt[0][0] * mean[0] + rt[0][1] * mean[1],
            rt[1][0] * mean[0] + rt[1][1] * mean[1],
        ];
        let mut out = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        out[a][b] += rt[a][k] * cov[k][l] * rt[b][l];
                    }
                }
            }
        }
        cov = out;
    }
    Ok((mean, cov))
}

/// Optical and vapour-cell constants, CGS lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsConstants {
    /// Probe power reaching the detector, W.
    pub power: f64,
    /// Photodiode responsivity, A/W.
    pub responsivity: f64,
    /// Classical electron radius, cm.
    pub r_e: f64,
    pub f_osc: f64,
    /// Effective beam area, cm².
    pub a_eff: f64,
    /// Probe detuning from the optical transition, Hz.
    pub detuning: f64,
    /// Pressure-broadened optical linewidth (FWHM), Hz.
    pub linewidth_fwhm: f64,
    /// Transimpedance gain, V/A.
    pub tia_gain: f64,
    /// Atomic density, cm⁻³.
    pub n_density: f64,
    /// Cell length, cm.
    pub length: f64,
}

impl PhysicsConstants {
    /// Rb D1 probe at 500 µW, 60 GHz detuning, 100 Torr N₂ cell.
    pub fn lab_defaults() -> Self {
        PhysicsConstants {
            power: 500e-6,
            responsivity: 0.59,
            r_e: 2.82e-13,
            f_osc: 0.34,
            a_eff: 0.016,
            detuning: 60e9,
            linewidth_fwhm: 4.8e9,
            tia_gain: 1e6,
            n_density: 4.5e12,
            length: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.power,
            self.responsivity,
            self.r_e,
            self.f_osc,
            self.a_eff,
            self.linewidth_fwhm,
            self.tia_gain,
            self.n_density,
            self.length,
        ];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(invalid("physical constants must be positive"));
        }
        if self.detuning == 0.0 || !self.detuning.is_finite() {
            return Err(invalid("detuning must be nonzero"));
        }
        Ok(())
    }

    fn geometric(&self) -> f64 {
        SPEED_OF_LIGHT_CM * self.r_e * self.f_osc / self.a_eff
    }
}

/// `g_D = 2ℜP (c r_e f_osc / A_eff) / detuning`, A per spin unit.
pub fn faraday_transduction(phys: &PhysicsConstants) -> Result<f64> {
    phys.validate()?;
    Ok(2.0 * phys.responsivity * phys.power * phys.geometric() / phys.detuning)
}

/// Dispersive coupling `g_α` including the optical linewidth; `detuning_to_line`
/// is the detuning from the hyperfine line α.
pub fn hyperfine_coupling(phys: &PhysicsConstants, detuning_to_line: f64) -> Result<f64> {
    phys.validate()?;
    let half = 0.5 * phys.linewidth_fwhm;
    Ok(phys.geometric() * phys.detuning / (detuning_to_line * detuning_to_line + half * half))
}

/// Number of atoms in the probed volume, `n A_eff L`.
pub fn atom_number(phys: &PhysicsConstants) -> Result<f64> {
    phys.validate()?;
    Ok(phys.n_density * phys.a_eff * phys.length)
}

/// Far-detuned Faraday rotation angle (rad) for collective spin `j_z`.
pub fn faraday_angle(phys: &PhysicsConstants, j_z: f64) -> Result<f64> {
    phys.validate()?;
    Ok(phys.geometric() / phys.detuning * j_z)
}

/// `g_P = b / g_D` from the measured linear-response slope `b`.
pub fn pump_coupling_from_slope(slope: f64, g_d: f64) -> Result<f64> {
    if g_d == 0.0 || !g_d.is_finite() || !slope.is_finite() {
        return Err(invalid("slope and g_D must be finite, g_D nonzero"));
    }
    Ok(slope / g_d)
}

/// Spin-noise rates and shot-noise intensity from a spectrum fit:
/// `Q_y = Q_z = 2 S_at / (T₂² g_D²)`, `R = S_ph`.
pub fn spin_noise_rates(fit: &PsdFit, g_d: f64) -> Result<(f64, f64, f64)> {
    if !(fit.s_at > 0.0) || !(fit.s_ph > 0.0) || !(fit.t2 > 0.0) || g_d == 0.0 {
        return Err(invalid("fit parameters must be positive and g_D nonzero"));
    }
    let q = 2.0 * fit.s_at / (fit.t2 * fit.t2 * g_d * g_d);
    Ok((q, q, fit.s_ph))
}

/// Indices of the quadrature pair at each derivative level.
pub fn quadrature_indices(variant: ModelVariant) -> Vec<(usize, usize)> {
    (0..=variant.order()).map(|l| (2 + 2 * l, 3 + 2 * l)).collect()
}
