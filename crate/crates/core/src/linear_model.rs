//! Linear-Gaussian state-space models with continuous dynamics and discrete
//! observations, and their exact one-interval propagators.
//!
//! The continuous part is `dx = F(t) x dt + G dw` with `⟨dw dwᵀ⟩ = Q dt`;
//! observations are `z_k = H x_k + v_k`, `v_k ~ N(0, R_Δ)`, taken every `Δ`
//! seconds.

use alloc::sync::Arc;
use core::fmt;

use nalgebra::DMatrix;
use num_traits::Float;

use crate::error::{dim_mismatch, invalid, Result};
use crate::linalg::{commutator, expm, is_psd, is_symmetric, symmetrize};

/// Default number of substeps per sampling interval for time-varying `F`.
pub const DEFAULT_SUBSTEPS: usize = 8;

/// The drift matrix of the continuous dynamics.
#[derive(Clone)]
pub enum Dynamics {
    Constant(DMatrix<f64>),
    TimeVarying(Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>),
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Dynamics::TimeVarying(_) => f.write_str("TimeVarying(..)"),
        }
    }
}

/// How the time-ordered exponential is approximated on each substep when
/// `F` depends on time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeOrdering {
    /// `F` frozen at the substep midpoint (second order).
    Midpoint,
    /// Two-node Gauss-Legendre Magnus expansion (fourth order).
    Magnus4,
    /// Three-node Gauss-Legendre Magnus expansion (sixth order).
    #[default]
    Magnus6,
}

/// Continuous-discrete linear model.
#[derive(Debug, Clone)]
pub struct LinearModel {
    dynamics: Dynamics,
    g: DMatrix<f64>,
    q: DMatrix<f64>,
    gqg: DMatrix<f64>,
    h: DMatrix<f64>,
    r_delta: DMatrix<f64>,
    delta: f64,
    substeps: usize,
    ordering: TimeOrdering,
    period: Option<f64>,
}

/// Exact discrete-time propagator over one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    pub phi: DMatrix<f64>,
    pub q_delta: DMatrix<f64>,
    pub t_start: f64,
    pub t_end: f64,
}

impl LinearModel {
    /// Time-invariant model with `G = I`.
    pub fn new(
        f: DMatrix<f64>,
        q: DMatrix<f64>,
        h: DMatrix<f64>,
        r_delta: DMatrix<f64>,
        delta: f64,
    ) -> Result<Self> {
        let n = f.nrows();
        Self::build(Dynamics::Constant(f), n, q, h, r_delta, delta)
    }

    /// Model whose drift matrix is a function of time. `f` must return a
    /// `dim_x × dim_x` matrix for every `t`.
    pub fn time_varying<Func>(
        dim_x: usize,
        f: Func,
        q: DMatrix<f64>,
        h: DMatrix<f64>,
        r_delta: DMatrix<f64>,
        delta: f64,
    ) -> Result<Self>
    where
        Func: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::build(Dynamics::TimeVarying(Arc::new(f)), dim_x, q, h, r_delta, delta)
    }

    fn build(
        dynamics: Dynamics,
        n: usize,
        q: DMatrix<f64>,
        h: DMatrix<f64>,
        r_delta: DMatrix<f64>,
        delta: f64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(invalid("state dimension must be positive"));
        }
        let f0 = match &dynamics {
            Dynamics::Constant(f) => f.clone(),
            Dynamics::TimeVarying(f) => f(0.0),
        };
        if f0.nrows() != n || f0.ncols() != n {
            return Err(dim_mismatch("F must be dim_x × dim_x"));
        }
        if f0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("F has non-finite entries"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid("sampling period must be positive"));
        }
        let model = LinearModel {
            dynamics,
            g: DMatrix::identity(n, n),
            gqg: q.clone(),
            q,
            h,
            r_delta,
            delta,
            substeps: DEFAULT_SUBSTEPS,
            ordering: TimeOrdering::default(),
            period: None,
        };
        model.validate_noise()?;
        Ok(model)
    }

    fn validate_noise(&self) -> Result<()> {
        let n = self.dim_x();
        if self.g.nrows() != n {
            return Err(dim_mismatch("G must have dim_x rows"));
        }
        let w = self.g.ncols();
        if self.q.nrows() != w || self.q.ncols() != w {
            return Err(dim_mismatch("Q must be dim_w × dim_w"));
        }
        if !is_psd(&self.q, 1e-12) {
            return Err(invalid("Q must be symmetric positive semidefinite"));
        }
        if self.h.ncols() != n || self.h.nrows() == 0 {
            return Err(dim_mismatch("H must be dim_z × dim_x"));
        }
        let m = self.h.nrows();
        if self.r_delta.nrows() != m || self.r_delta.ncols() != m {
            return Err(dim_mismatch("R_delta must be dim_z × dim_z"));
        }
        if !is_symmetric(&self.r_delta, 1e-12) || self.r_delta.clone().cholesky().is_none() {
            return Err(invalid("R_delta must be symmetric positive definite"));
        }
        if self.h.iter().chain(self.q.iter()).chain(self.r_delta.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("model matrices must be finite"));
        }
        Ok(())
    }

    /// Replace the noise input matrix `G` (default identity); `Q` must match its
    /// column count.
    pub fn with_noise_input(mut self, g: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        self.gqg = &g * &q * g.transpose();
        symmetrize(&mut self.gqg);
        self.g = g;
        self.q = q;
        self.validate_noise()?;
        Ok(self)
    }

    /// Substep count and scheme used for time-varying drift matrices.
    pub fn with_time_ordering(mut self, substeps: usize, ordering: TimeOrdering) -> Result<Self> {
        if substeps == 0 {
            return Err(invalid("substep count must be at least 1"));
        }
        self.substeps = substeps;
        self.ordering = ordering;
        Ok(self)
    }

    /// Declares `F(t + period) = F(t)`. Filters reuse propagators when the
    /// period is a whole number of sampling intervals.
    pub fn with_period(mut self, period: f64) -> Result<Self> {
        if !(period > 0.0) || !period.is_finite() {
            return Err(invalid("period must be positive"));
        }
        self.period = Some(period);
        Ok(self)
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn dim_x(&self) -> usize {
        self.g.nrows()
    }

    pub fn dim_z(&self) -> usize {
        self.h.nrows()
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn f_at(&self, t: f64) -> DMatrix<f64> {
        match &self.dynamics {
            Dynamics::Constant(f) => f.clone(),
            Dynamics::TimeVarying(f) => f(t),
        }
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `G Q Gᵀ`.
    pub fn process_noise(&self) -> &DMatrix<f64> {
        &self.gqg
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r_delta(&self) -> &DMatrix<f64> {
        &self.r_delta
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn time_ordering(&self) -> TimeOrdering {
        self.ordering
    }

    pub fn is_time_invariant(&self) -> bool {
        matches!(self.dynamics, Dynamics::Constant(_))
    }

    /// Transition matrix and effective process noise over `[t_prev, t_next]`.
    pub fn propagator(&self, t_prev: f64, t_next: f64) -> Result<Propagator> {
        if !(t_next > t_prev) {
            return Err(invalid("propagator interval must have t_next > t_prev"));
        }
        let tau = t_next - t_prev;
        let (phi, q_delta) = match &self.dynamics {
            Dynamics::Constant(f) => van_loan(f, &self.gqg, tau)?,
            Dynamics::TimeVarying(f) => {
                time_ordered(f.as_ref(), &self.gqg, t_prev, tau, self.substeps, self.ordering)?
            }
        };
        Ok(Propagator {
            phi,
            q_delta,
            t_start: t_prev,
            t_end: t_next,
        })
    }
}

/// `exp(F τ)`.
pub fn transition_matrix(f: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(invalid("duration must be finite and non-negative"));
    }
    expm(&(f * tau))
}

/// `Q_Δ = ∫₀^Δ e^{Fs} G Q Gᵀ e^{Fᵀs} ds`, symmetrized.
pub fn discretize_noise(
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    q: &DMatrix<f64>,
    delta: f64,
) -> Result<DMatrix<f64>> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(invalid("sampling period must be positive"));
    }
    if !f.is_square() || g.nrows() != f.nrows() || q.nrows() != g.ncols() || !q.is_square() {
        return Err(dim_mismatch("F, G, Q dimensions are inconsistent"));
    }
    let gqg = g * q * g.transpose();
    Ok(van_loan(f, &gqg, delta)?.1)
}

fn augmented(f: &DMatrix<f64>, gqg: &DMatrix<f64>) -> DMatrix<f64> {
    let n = f.nrows();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n)).copy_from(f);
    a.view_mut((0, n), (n, n)).copy_from(gqg);
    a.view_mut((n, n), (n, n)).copy_from(&(-f.transpose()));
    a
}

/// From `U = T exp ∫ [[F, GQGᵀ], [0, −Fᵀ]]` recover `Φ = U₁₁` and
/// `Q_Δ = U₁₂ Φᵀ`.
fn split_augmented(u: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let phi = u.view((0, 0), (n, n)).into_owned();
    let mut q_delta = u.view((0, n), (n, n)) * phi.transpose();
    symmetrize(&mut q_delta);
    (phi, q_delta)
}

fn van_loan(f: &DMatrix<f64>, gqg: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = f.nrows();
    let u = expm(&(augmented(f, gqg) * tau))?;
    Ok(split_augmented(&u, n))
}

fn time_ordered(
    f: &(dyn Fn(f64) -> DMatrix<f64> + Send + Sync),
    gqg: &DMatrix<f64>,
    t0: f64,
    tau: f64,
    substeps: usize,
    ordering: TimeOrdering,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = gqg.nrows();
    let h = tau / substeps as f64;
    let gen = |t: f64| augmented(&f(t), gqg);
    let mut u = DMatrix::<f64>::identity(2 * n, 2 * n);
    for i in 0..substeps {
        let a = t0 + h * i as f64;
        let omega = match ordering {
            TimeOrdering::Midpoint => gen(a + 0.5 * h) * h,
            TimeOrdering::Magnus4 => {
                let c = 3.0.sqrt() / 6.0;
                let a1 = gen(a + (0.5 - c) * h);
                let a2 = gen(a + (0.5 + c) * h);
                (&a1 + &a2) * (0.5 * h) + commutator(&a2, &a1) * (3.0.sqrt() / 12.0 * h * h)
            }
            TimeOrdering::Magnus6 => {
                let c = 15.0.sqrt() / 10.0;
                let a1 = gen(a + (0.5 - c) * h);
                let a2 = gen(a + 0.5 * h);
                let a3 = gen(a + (0.5 + c) * h);
                let alpha1 = &a2 * h;
                let alpha2 = (&a3 - &a1) * (15.0.sqrt() * h / 3.0);
                let alpha3 = (&a3 - &a2 * 2.0 + &a1) * (10.0 * h / 3.0);
                let q1 = commutator(&alpha1, &alpha2);
                let q2 = commutator(&alpha1, &(&alpha3 * 2.0 + &q1));
                let q3 = commutator(
                    &(&alpha1 * -20.0 - &alpha3 + &q1),
                    &(&alpha2 - &q2 * (1.0 / 60.0)),
                );
                &alpha1 + &alpha3 * (1.0 / 12.0) + q3 * (1.0 / 240.0)
            }
        };
        u = expm(&omega)? * u;
    }
    Ok(split_augmented(&u, n))
}
