//! Continuous-discrete (hybrid) Kalman filter.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use nalgebra::{DMatrix, DVector};

use crate::error::{dim_mismatch, invalid, Error, Result};
use crate::linalg::symmetrize;
use crate::linear_model::{LinearModel, Propagator};

/// Default prior variance for [`diffuse_prior`].
pub const DEFAULT_DIFFUSE_KAPPA: f64 = 1e6;

/// Which half of the recursion produced a belief.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// `x̂_{k|k−1}`
    Predicted,
    /// `x̂_{k|k}`
    Updated,
}

/// Gaussian state estimate `N(mean, cov)` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub t: f64,
    pub stage: Stage,
}

/// Per-observation quantities computed during an update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub nis: f64,
    pub predicted_obs: DVector<f64>,
}

/// A timestamped observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub z: DVector<f64>,
}

impl Observation {
    pub fn scalar(t: f64, z: f64) -> Self {
        Observation {
            t,
            z: DVector::from_element(1, z),
        }
    }
}

/// One filter step: updated belief after observation `k` and its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub belief: GaussianBelief,
    pub diagnostics: StepDiagnostics,
}

/// Output of [`run_filter`]. `steps[i]` corresponds to observation `i + 1`;
/// observation 0 is consumed by initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub initial: GaussianBelief,
    pub steps: Vec<FilterStep>,
}

/// Prior from the first observation: `μ₀ = H⁺z₀`, `Σ₀ = GQGᵀ + H⁺R_Δ(H⁺)ᵀ`.
pub fn initialize(model: &LinearModel, t0: f64, z0: &DVector<f64>) -> Result<GaussianBelief> {
    if z0.len() != model.dim_z() {
        return Err(dim_mismatch("z0 must have dim_z entries"));
    }
    let h = model.h();
    let svd = h.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 || !smax.is_finite() {
        return Err(Error::InitializationImpossible(
            "observation matrix has rank zero".into(),
        ));
    }
    let eps = smax * 1e-12 * h.nrows().max(h.ncols()) as f64;
    let h_pinv = svd
        .pseudo_inverse(eps)
        .map_err(|_| Error::InitializationImpossible("pseudoinverse failed".into()))?;
    let mean = &h_pinv * z0;
    let mut cov = model.process_noise() + &h_pinv * model.r_delta() * h_pinv.transpose();
    symmetrize(&mut cov);
    Ok(GaussianBelief {
        mean,
        cov,
        t: t0,
        stage: Stage::Updated,
    })
}

/// Uninformative prior `N(0, κ I)` at `t0`, ready for an update at `t0`.
pub fn diffuse_prior(model: &LinearModel, t0: f64, kappa: f64) -> Result<GaussianBelief> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(invalid("diffuse prior variance must be positive"));
    }
    let n = model.dim_x();
    Ok(GaussianBelief {
        mean: DVector::zeros(n),
        cov: DMatrix::identity(n, n) * kappa,
        t: t0,
        stage: Stage::Predicted,
    })
}

/// `x̂ ← Φx̂`, `Σ ← ΦΣΦᵀ + Q_Δ`.
pub fn predict(belief: &GaussianBelief, prop: &Propagator) -> Result<GaussianBelief> {
    let n = belief.mean.len();
    if prop.phi.nrows() != n || prop.phi.ncols() != n || belief.cov.nrows() != n {
        return Err(dim_mismatch("propagator and belief dimensions differ"));
    }
    if belief.stage != Stage::Updated {
        return Err(invalid("predict requires an updated belief"));
    }
    let scale = belief.t.abs().max(prop.t_end - prop.t_start);
    if (prop.t_start - belief.t).abs() > 1e-9 * scale {
        return Err(invalid("propagator does not start at the belief time"));
    }
    let mean = &prop.phi * &belief.mean;
    let mut cov = &prop.phi * &belief.cov * prop.phi.transpose() + &prop.q_delta;
    symmetrize(&mut cov);
    Ok(GaussianBelief {
        mean,
        cov,
        t: prop.t_end,
        stage: Stage::Predicted,
    })
}

/// Conditions a predicted belief on `z` using the Joseph-form covariance update.
pub fn update(
    belief: &GaussianBelief,
    model: &LinearModel,
    z: &DVector<f64>,
) -> Result<(GaussianBelief, StepDiagnostics)> {
    if belief.stage != Stage::Predicted {
        return Err(invalid("update requires a predicted belief"));
    }
    let n = model.dim_x();
    if belief.mean.len() != n || z.len() != model.dim_z() {
        return Err(dim_mismatch("belief or observation has wrong dimension"));
    }
    let h = model.h();
    let r = model.r_delta();
    let predicted_obs = h * &belief.mean;
    let innovation = z - &predicted_obs;
    let ph = &belief.cov * h.transpose();
    let mut s = h * &ph + r;
    symmetrize(&mut s);
    let chol = s.clone().cholesky().ok_or(Error::IllConditionedUpdate)?;
    // K = P Hᵀ S⁻¹ = (S⁻¹ H P)ᵀ
    let gain = chol.solve(&ph.transpose()).transpose();
    let nis = innovation.dot(&chol.solve(&innovation)).max(0.0);
    if !nis.is_finite() || gain.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditionedUpdate);
    }
    let mean = &belief.mean + &gain * &innovation;
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let mut cov = &i_kh * &belief.cov * i_kh.transpose() + &gain * r * gain.transpose();
    symmetrize(&mut cov);
    Ok((
        GaussianBelief {
            mean,
            cov,
            t: belief.t,
            stage: Stage::Updated,
        },
        StepDiagnostics {
            innovation,
            innovation_cov: s,
            gain,
            nis,
            predicted_obs,
        },
    ))
}

fn check_spacing(model: &LinearModel, observations: &[Observation]) -> Result<()> {
    let delta = model.delta();
    for w in observations.windows(2) {
        let dt = w[1].t - w[0].t;
        if !(dt > 0.0) || (dt - delta).abs() > 1e-9 * delta.max(w[1].t.abs() * 1e-6) {
            return Err(invalid("observations must be uniformly spaced by the model period"));
        }
    }
    Ok(())
}

/// Supplies propagators for consecutive intervals, reusing them when the
/// model is time-invariant or periodic with a period that is a whole number
/// of samples.
struct PropagatorSource<'a> {
    model: &'a LinearModel,
    cache: Vec<Propagator>,
    cycle: usize,
}

impl<'a> PropagatorSource<'a> {
    fn new(model: &'a LinearModel) -> Self {
        let cycle = if model.is_time_invariant() {
            1
        } else {
            match model.period() {
                Some(p) => {
                    let m = p / model.delta();
                    let mr = m.round();
                    if mr >= 1.0 && (m - mr).abs() < 1e-9 * mr && mr <= 4096.0 {
                        mr as usize
                    } else {
                        0
                    }
                }
                None => 0,
            }
        };
        PropagatorSource {
            model,
            cache: Vec::new(),
            cycle,
        }
    }

    fn get(&mut self, k: usize, t_prev: f64, t_next: f64) -> Result<Propagator> {
        if self.cycle == 0 {
            return self.model.propagator(t_prev, t_next);
        }
        let slot = k % self.cycle;
        if slot == self.cache.len() {
            self.cache.push(self.model.propagator(t_prev, t_next)?);
        }
        let mut p = self.cache[slot].clone();
        p.t_start = t_prev;
        p.t_end = t_next;
        Ok(p)
    }
}

/// Filters a uniformly sampled observation stream, initializing from the
/// first observation.
pub fn run_filter(model: &LinearModel, observations: &[Observation]) -> Result<FilterRun> {
    let first = observations
        .first()
        .ok_or_else(|| invalid("observation sequence is empty"))?;
    let initial = initialize(model, first.t, &first.z)?;
    run_from(model, initial, observations)
}

/// Filters from an explicit prior. An updated prior is taken to already
/// include `observations[0]`; a predicted prior is updated with it first and
/// that step is included in the output.
pub fn run_filter_with_prior(
    model: &LinearModel,
    prior: GaussianBelief,
    observations: &[Observation],
) -> Result<FilterRun> {
    if observations.is_empty() {
        return Err(invalid("observation sequence is empty"));
    }
    run_from(model, prior, observations)
}

fn run_from(
    model: &LinearModel,
    prior: GaussianBelief,
    observations: &[Observation],
) -> Result<FilterRun> {
    check_spacing(model, observations)?;
    if prior.mean.len() != model.dim_x() {
        return Err(dim_mismatch("prior has wrong dimension"));
    }
    let mut steps = Vec::with_capacity(observations.len());
    let mut belief = prior.clone();
    let t0 = observations[0].t;
    if belief.stage == Stage::Predicted {
        let (b, d) = update(&belief, model, &observations[0].z)?;
        steps.push(FilterStep {
            belief: b.clone(),
            diagnostics: d,
        });
        belief = b;
    }
    let mut props = PropagatorSource::new(model);
    let delta = model.delta();
    for (k, obs) in observations.iter().enumerate().skip(1) {
        // Times are reconstructed from t0 so propagators stay on the grid.
        let t_prev = t0 + delta * (k - 1) as f64;
        let t_next = t0 + delta * k as f64;
        let prop = props.get(k - 1, t_prev, t_next)?;
        belief.t = t_prev;
        let predicted = predict(&belief, &prop)?;
        let (mut updated, diagnostics) = update(&predicted, model, &obs.z)?;
        updated.t = obs.t;
        belief = updated.clone();
        steps.push(FilterStep {
            belief: updated,
            diagnostics,
        });
    }
    Ok(FilterRun {
        initial: prior,
        steps,
    })
}
