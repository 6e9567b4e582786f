//! Steady-state Riccati solutions for the discrete filter and the
//! continuous-time (Kalman-Bucy) limit.

#[allow(unused_imports)]
use num_traits::Float;
use nalgebra::DMatrix;

use crate::error::{dim_mismatch, invalid, Error, Result};
use crate::linalg::{balance, norm1, symmetrize};
use crate::linear_model::LinearModel;

/// Algorithm used by [`solve_dare`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DareMethod {
    /// Iterate the predict/update covariance map until it stops moving.
    #[default]
    FixedPoint,
    /// Structure-preserving doubling, polished by fixed-point steps if needed.
    Doubling,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: DareMethod,
}

impl Default for DareOptions {
    fn default() -> Self {
        DareOptions {
            tol: 1e-12,
            max_iter: 1_000_000,
            method: DareMethod::FixedPoint,
        }
    }
}

/// Steady-state filter quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub sigma_pred: DMatrix<f64>,
    pub sigma_upd: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub innov_cov: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

struct UpdateParts {
    sigma_upd: DMatrix<f64>,
    gain: DMatrix<f64>,
    innov_cov: DMatrix<f64>,
}

fn update_cov(sigma: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<UpdateParts> {
    let n = sigma.nrows();
    let ph = sigma * h.transpose();
    let mut s = h * &ph + r;
    symmetrize(&mut s);
    let chol = s.clone().cholesky().ok_or(Error::IllConditionedUpdate)?;
    let gain = chol.solve(&ph.transpose()).transpose();
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let mut sigma_upd = &i_kh * sigma * i_kh.transpose() + &gain * r * gain.transpose();
    symmetrize(&mut sigma_upd);
    Ok(UpdateParts {
        sigma_upd,
        gain,
        innov_cov: s,
    })
}

fn riccati_map(
    sigma: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let upd = update_cov(sigma, h, r)?;
    let mut next = phi * upd.sigma_upd * phi.transpose() + q;
    symmetrize(&mut next);
    Ok(next)
}

/// Frobenius norm that does not overflow for entries near `f64::MAX.sqrt()`.
fn frobenius(m: &DMatrix<f64>) -> f64 {
    let a = m.amax();
    if a == 0.0 || !a.is_finite() {
        return a;
    }
    a * (m / a).norm()
}

fn relative_change(next: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let d = frobenius(&(next - sigma));
    let s = frobenius(sigma);
    if s == 0.0 {
        if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        d / s
    }
}

/// `‖DARE(Σ) − Σ‖_F / ‖Σ‖_F` by direct substitution.
pub fn dare_residual(
    sigma_pred: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q_delta: &DMatrix<f64>,
    r_delta: &DMatrix<f64>,
) -> Result<f64> {
    let next = riccati_map(sigma_pred, phi, h, q_delta, r_delta)?;
    Ok(relative_change(&next, sigma_pred))
}

fn check_dare_inputs(
    phi: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<()> {
    let n = phi.nrows();
    if !phi.is_square() || q.shape() != (n, n) || h.ncols() != n || r.shape() != (h.nrows(), h.nrows())
    {
        return Err(dim_mismatch("DARE inputs have inconsistent shapes"));
    }
    if r.clone().cholesky().is_none() {
        return Err(invalid("R_delta must be positive definite"));
    }
    Ok(())
}

/// Solves `Σ⁻ = ΦΣ⁻Φᵀ − ΦΣ⁻Hᵀ(R_Δ + HΣ⁻Hᵀ)⁻¹HΣ⁻Φᵀ + Q_Δ`.
pub fn solve_dare(
    phi: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q_delta: &DMatrix<f64>,
    r_delta: &DMatrix<f64>,
    opts: &DareOptions,
) -> Result<SteadyState> {
    check_dare_inputs(phi, h, q_delta, r_delta)?;
    let mut iterations = 0usize;
    let start = match opts.method {
        DareMethod::FixedPoint => q_delta.clone(),
        DareMethod::Doubling => {
            let (x, it) = doubling(phi, &(h.transpose() * cholesky_inverse(r_delta)? * h), q_delta)?;
            iterations += it;
            x
        }
    };
    let (sigma_pred, it, residual) = fixed_point(start, phi, h, q_delta, r_delta, opts)?;
    iterations += it;
    let upd = update_cov(&sigma_pred, h, r_delta)?;
    Ok(SteadyState {
        sigma_pred,
        sigma_upd: upd.sigma_upd,
        gain: upd.gain,
        innov_cov: upd.innov_cov,
        iterations,
        residual,
    })
}

/// Steady state of a time-invariant model over one sampling period.
pub fn steady_state(model: &LinearModel, opts: &DareOptions) -> Result<SteadyState> {
    if !model.is_time_invariant() {
        return Err(invalid("steady state requires a time-invariant model"));
    }
    let prop = model.propagator(0.0, model.delta())?;
    solve_dare(&prop.phi, model.h(), &prop.q_delta, model.r_delta(), opts)
}

fn fixed_point(
    mut sigma: DMatrix<f64>,
    phi: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: &DareOptions,
) -> Result<(DMatrix<f64>, usize, f64)> {
    let mut residual = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let next = riccati_map(&sigma, phi, h, q, r)?;
        residual = relative_change(&next, &sigma);
        if !residual.is_finite() && sigma.norm() != 0.0 || !(next.amax() < 1e200) {
            return Err(Error::NoSteadyState {
                iterations: it,
                residual,
            });
        }
        if residual <= opts.tol {
            return Ok((sigma, it, residual));
        }
        sigma = next;
    }
    Err(Error::NoSteadyState {
        iterations: opts.max_iter,
        residual,
    })
}

fn cholesky_inverse(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| invalid("matrix must be positive definite"))?;
    Ok(chol.inverse())
}

/// Doubling iteration for `X = AᵀXA − AᵀXB(I + GX)⁻¹…` written in filter form
/// with `A = Φᵀ`, `G = HᵀR⁻¹H`, `H₀ = Q`. Returns the limit of `H_k`.
fn doubling(
    phi: &DMatrix<f64>,
    g0: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, usize)> {
    let n = phi.nrows();
    let mut a = phi.transpose();
    let mut g = g0.clone();
    let mut x = q.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    for it in 1..=200 {
        let w = &eye + &g * &x;
        let lu = w.lu();
        let w_inv_a = lu.solve(&a).ok_or(Error::NoSteadyState {
            iterations: it,
            residual: f64::NAN,
        })?;
        let w_inv_g = lu.solve(&g).ok_or(Error::NoSteadyState {
            iterations: it,
            residual: f64::NAN,
        })?;
        let a_next = &a * &w_inv_a;
        let mut g_next = &g + &a * w_inv_g * a.transpose();
        let mut x_next = &x + a.transpose() * &x * &w_inv_a;
        symmetrize(&mut g_next);
        symmetrize(&mut x_next);
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoSteadyState {
                iterations: it,
                residual: f64::NAN,
            });
        }
        let change = relative_change(&x_next, &x);
        a = a_next;
        g = g_next;
        x = x_next;
        if change <= 4.0 * f64::EPSILON || norm1(&a) <= f64::EPSILON * 1e-3 {
            return Ok((x, it));
        }
    }
    Ok((x, 200))
}

/// Stationary covariance `X = ΦXΦᵀ + Q` of a stable discrete system.
pub fn solve_discrete_lyapunov(phi: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = phi.nrows();
    if !phi.is_square() || q.shape() != (n, n) {
        return Err(dim_mismatch("Lyapunov inputs have inconsistent shapes"));
    }
    let (x, _) = doubling(phi, &DMatrix::zeros(n, n), q)?;
    let mut check = phi * &x * phi.transpose() + q;
    symmetrize(&mut check);
    let r = relative_change(&check, &x);
    if !(r <= 1e-8) {
        return Err(Error::NoSteadyState {
            iterations: 200,
            residual: r,
        });
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CareOptions {
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for CareOptions {
    fn default() -> Self {
        CareOptions {
            tol: 1e-10,
            max_steps: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub sigma: DMatrix<f64>,
    pub residual: f64,
    pub steps: usize,
}

struct VarianceEquation<'a> {
    f: &'a DMatrix<f64>,
    gqg: &'a DMatrix<f64>,
    /// `HᵀR⁻¹H`
    info: DMatrix<f64>,
}

impl VarianceEquation<'_> {
    fn rate(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let fs = self.f * s;
        let mut d = &fs + fs.transpose() + self.gqg - s * &self.info * s;
        symmetrize(&mut d);
        d
    }

    fn residual(&self, s: &DMatrix<f64>) -> f64 {
        let fs = self.f * s;
        let quad = s * &self.info * s;
        let scale = 2.0 * fs.norm() + self.gqg.norm() + quad.norm();
        if scale == 0.0 {
            return 0.0;
        }
        (&fs + fs.transpose() + self.gqg - quad).norm() / scale
    }

    fn rk4(&self, s: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
        let k1 = self.rate(s);
        let k2 = self.rate(&(s + &k1 * (0.5 * dt)));
        let k3 = self.rate(&(s + &k2 * (0.5 * dt)));
        let k4 = self.rate(&(s + &k3 * dt));
        let mut next = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        symmetrize(&mut next);
        next
    }

    fn stable_step(&self, s: &DMatrix<f64>) -> f64 {
        let closed = self.f - s * &self.info;
        let coupling = (norm1(self.gqg) * norm1(&self.info)).sqrt();
        0.5 / (norm1(&closed) + 2.0 * coupling).max(1e-300)
    }
}

fn variance_equation<'a>(
    f: &'a DMatrix<f64>,
    h: &DMatrix<f64>,
    gqg: &'a DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<VarianceEquation<'a>> {
    let n = f.nrows();
    if !f.is_square() || gqg.shape() != (n, n) || h.ncols() != n || r.shape() != (h.nrows(), h.nrows())
    {
        return Err(dim_mismatch("variance-equation inputs have inconsistent shapes"));
    }
    let r_inv = cholesky_inverse(r)?;
    Ok(VarianceEquation {
        f,
        gqg,
        info: h.transpose() * r_inv * h,
    })
}

/// Solves `0 = FΣ + ΣFᵀ + GQGᵀ − ΣHᵀR⁻¹HΣ` by integrating the variance
/// equation from `Σ = 0` until the relative residual drops below `tol`.
///
/// The state is first rescaled by the balancing of `F` so that the RK4 step
/// follows the dynamics rather than the units; `residual` is reported in the
/// rescaled coordinates.
pub fn solve_care(
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    gqg: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: &CareOptions,
) -> Result<CareSolution> {
    let n = f.nrows();
    if !f.is_square() || gqg.shape() != (n, n) || h.ncols() != n {
        return Err(dim_mismatch("variance-equation inputs have inconsistent shapes"));
    }
    let (fb, d) = balance(f);
    let gqg_b = DMatrix::from_fn(n, n, |i, j| gqg[(i, j)] / (d[i] * d[j]));
    let h_b = DMatrix::from_fn(h.nrows(), n, |i, j| h[(i, j)] * d[j]);
    let mut sol = solve_care_unscaled(&fb, &h_b, &gqg_b, r, opts)?;
    sol.sigma = DMatrix::from_fn(n, n, |i, j| sol.sigma[(i, j)] * d[i] * d[j]);
    Ok(sol)
}

fn solve_care_unscaled(
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    gqg: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: &CareOptions,
) -> Result<CareSolution> {
    let eq = variance_equation(f, h, gqg, r)?;
    let n = f.nrows();
    let mut s = DMatrix::zeros(n, n);
    let mut residual = eq.residual(&s);
    for step in 0..opts.max_steps {
        if residual <= opts.tol {
            return Ok(CareSolution {
                sigma: s,
                residual,
                steps: step,
            });
        }
        let dt = eq.stable_step(&s);
        s = eq.rk4(&s, dt);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoSteadyState {
                iterations: step,
                residual: f64::NAN,
            });
        }
        residual = eq.residual(&s);
    }
    Err(Error::NoSteadyState {
        iterations: opts.max_steps,
        residual,
    })
}

/// Fixed-step RK4 integration of the variance equation from `sigma0` over
/// `[0, t_end]`; the last step is shortened to land on `t_end`.
pub fn integrate_variance_equation(
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    gqg: &DMatrix<f64>,
    r: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    t_end: f64,
    dt: f64,
) -> Result<DMatrix<f64>> {
    if !(dt > 0.0) || !dt.is_finite() || !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(invalid("need dt > 0 and t_end ≥ 0"));
    }
    let eq = variance_equation(f, h, gqg, r)?;
    if sigma0.shape() != f.shape() {
        return Err(dim_mismatch("sigma0 must match F"));
    }
    let mut s = sigma0.clone();
    let mut t = 0.0;
    while t < t_end {
        let step = dt.min(t_end - t);
        s = eq.rk4(&s, step);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepTooLarge { t });
        }
        t = if t_end - t <= dt { t_end } else { t + dt };
    }
    Ok(s)
}

/// `K = ΣHᵀR⁻¹`.
pub fn kalman_bucy_gain(
    sigma: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if h.ncols() != sigma.nrows() || r.shape() != (h.nrows(), h.nrows()) {
        return Err(dim_mismatch("gain inputs have inconsistent shapes"));
    }
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| invalid("R must be positive definite"))?;
    Ok(chol.solve(&(h * sigma)).transpose())
}
