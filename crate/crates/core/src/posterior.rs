//! Tweedie denoising, the measurement-aware posterior mean, the DPS gradient
//! and the stochastic posterior sampler.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{apply_adjoint, residual, CoilSet, Measurements};
use crate::score::{NoiseSchedule, ScoreLinearization, ScoreModel};
use crate::tensor::{standard_normal_channels, ComplexImage, KSpaceGrid, Rng};

/// Default `rho` for 32x32 images, where the normalized correction moves `x`
/// by about `2 rho` per step.
pub const DEFAULT_RHO: f64 = 0.8;

/// Residual norms below this skip the normalized DPS correction.
pub const DPS_RESIDUAL_FLOOR: f64 = 1e-12;

/// `x_t + sigma^2 s(x_t, sigma)`; at `sigma = 0` the input is returned as is.
pub fn tweedie_denoise(score: &dyn ScoreModel, x_t: &ComplexImage, sigma: f64) -> Result<ComplexImage> {
    if sigma == 0.0 {
        return Ok(x_t.clone());
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let s = score.score(x_t, sigma)?;
    let mut out = x_t.clone();
    out.axpy(sigma * sigma, &s);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMeanConfig {
    pub gamma: f64,
    /// Differentiate through the denoiser (`false` treats `x0_hat` as `x_t` plus a constant).
    pub use_jacobian: bool,
}

impl Default for PosteriorMeanConfig {
    fn default() -> Self {
        Self { gamma: 1.0, use_jacobian: true }
    }
}

/// One evaluation of the denoiser and the data-consistency gradient at `x_t`.
pub struct DpsEval {
    pub denoised: ComplexImage,
    /// `A x0_hat - y` per coil.
    pub residual: Vec<KSpaceGrid>,
    pub residual_norm: f64,
    /// `grad_{x_t} ||A x0_hat - y||^2`
    pub grad: ComplexImage,
}

fn linearize_at<'a>(
    score: &'a dyn ScoreModel,
    x_t: &ComplexImage,
    sigma: f64,
) -> Result<Option<Box<dyn ScoreLinearization + 'a>>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(None);
    }
    Ok(Some(score.linearize(x_t, sigma)?))
}

fn dps_from_linearization(
    lin: Option<&dyn ScoreLinearization>,
    x_t: &ComplexImage,
    sigma: f64,
    y: &Measurements,
    coils: &CoilSet,
    use_jacobian: bool,
) -> Result<DpsEval> {
    let mut denoised = x_t.clone();
    if let Some(lin) = lin {
        denoised.axpy(sigma * sigma, lin.score());
    }
    let r = residual(&denoised, y, coils)?;
    let residual_norm = r.iter().map(KSpaceGrid::norm_sqr).sum::<f64>().sqrt();
    let u = apply_adjoint(&r, coils, &y.mask)?.scaled(2.0);
    let grad = match (lin, use_jacobian) {
        (Some(lin), true) => {
            let mut g = u.clone();
            g.axpy(sigma * sigma, &lin.vjp(&u)?);
            g
        }
        _ => u,
    };
    Ok(DpsEval { denoised, residual: r, residual_norm, grad })
}

/// Denoised estimate and `2 (I + sigma^2 ds/dx)^T A^H (A x0_hat - y)`.
pub fn dps_eval(
    score: &dyn ScoreModel,
    x_t: &ComplexImage,
    sigma: f64,
    y: &Measurements,
    coils: &CoilSet,
    use_jacobian: bool,
) -> Result<DpsEval> {
    let lin = linearize_at(score, x_t, sigma)?;
    dps_from_linearization(lin.as_deref(), x_t, sigma, y, coils, use_jacobian)
}

/// `grad_{x_t} ||A(x0_hat(x_t)) - y||^2` with the full chain rule.
pub fn dps_step_gradient(
    score: &dyn ScoreModel,
    x_t: &ComplexImage,
    sigma: f64,
    y: &Measurements,
    coils: &CoilSet,
) -> Result<ComplexImage> {
    Ok(dps_eval(score, x_t, sigma, y, coils, true)?.grad)
}

/// `x0_hat - gamma grad_{x_t} ||A x0_hat - y||^2`.
pub fn posterior_mean(
    score: &dyn ScoreModel,
    x_t: &ComplexImage,
    sigma: f64,
    y: &Measurements,
    coils: &CoilSet,
    cfg: &PosteriorMeanConfig,
) -> Result<ComplexImage> {
    if !(cfg.gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {}", cfg.gamma)));
    }
    let eval = dps_eval(score, x_t, sigma, y, coils, cfg.use_jacobian)?;
    let mut out = eval.denoised;
    out.axpy(-cfg.gamma, &eval.grad);
    Ok(out)
}

/// How the deterministic part of a sampler step moves `x`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EulerRule {
    /// `x + (sigma_hat - sigma_next) sigma_hat s`: Euler on the probability-flow ODE `dx/dsigma = -sigma s`.
    #[default]
    Flow,
    /// `x + (sigma_hat - sigma_next) s`, without the `sigma_hat` factor.
    Unscaled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub s_churn: f64,
    pub rho: f64,
    pub seed: u64,
    #[serde(default)]
    pub euler: EulerRule,
}

impl SamplerConfig {
    pub fn new(steps: usize, rho: f64, s_churn: f64, seed: u64) -> Self {
        Self { schedule: NoiseSchedule::with_steps(steps), s_churn, rho, seed, euler: EulerRule::Flow }
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps
    }

    /// Per-step churn fraction `min(S_churn / N, sqrt(2) - 1)`.
    pub fn churn_alpha(&self) -> f64 {
        (self.s_churn / self.schedule.steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.s_churn >= 0.0) || !self.s_churn.is_finite() {
            return Err(Error::invalid("s_churn must be finite and >= 0"));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid("rho must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub sigma: f64,
    pub denoised_norm: f64,
    pub residual_norm: f64,
}

pub fn write_trajectory_csv(rows: &[TraceRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,sigma,denoised_norm,residual_norm")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.sigma, r.denoised_norm, r.residual_norm)?;
    }
    Ok(())
}

/// Draws a reconstruction from the measurement-conditioned reverse process.
pub fn sample_posterior(
    score: &dyn ScoreModel,
    y: &Measurements,
    coils: &CoilSet,
    cfg: &SamplerConfig,
) -> Result<ComplexImage> {
    sample_posterior_traced(score, y, coils, cfg, None)
}

/// As [`sample_posterior`], optionally recording one [`TraceRow`] per step.
///
/// Steps run from `i = N` down to `1`: churn (`x_hat = x + sqrt(sigma_hat^2 -
/// sigma^2) z`), denoise, Euler step, then the normalized DPS correction with
/// `rho_dps = rho / ||y - A x0_hat||`. With `rho = 0` the correction is skipped.
pub fn sample_posterior_traced(
    score: &dyn ScoreModel,
    y: &Measurements,
    coils: &CoilSet,
    cfg: &SamplerConfig,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<ComplexImage> {
    cfg.validate()?;
    let (h, w) = coils.shape();
    let sigmas = cfg.schedule.sigmas();
    let n = cfg.steps();
    let alpha = cfg.churn_alpha();
    let mut rng = Rng::new(cfg.seed);
    let mut x = standard_normal_channels(&mut rng, h, w).scaled(sigmas[0]);

    for j in 0..n {
        let step = n - j;
        let (sigma, sigma_next) = (sigmas[j], sigmas[j + 1]);
        let sigma_hat = sigma + alpha * sigma;
        if alpha > 0.0 {
            let z = standard_normal_channels(&mut rng, h, w);
            x.axpy((sigma_hat * sigma_hat - sigma * sigma).max(0.0).sqrt(), &z);
        }
        let lin = linearize_at(score, &x, sigma_hat)?;
        let lin = lin.as_deref();
        let dt = match cfg.euler {
            EulerRule::Flow => (sigma_hat - sigma_next) * sigma_hat,
            EulerRule::Unscaled => sigma_hat - sigma_next,
        };
        let mut next = x.clone();
        if let Some(lin) = lin {
            next.axpy(dt, lin.score());
        }
        let (denoised_norm, residual_norm) = if cfg.rho > 0.0 {
            let eval = dps_from_linearization(lin, &x, sigma_hat, y, coils, true)?;
            if eval.residual_norm >= DPS_RESIDUAL_FLOOR {
                next.axpy(-cfg.rho / eval.residual_norm, &eval.grad);
            }
            (eval.denoised.norm(), eval.residual_norm)
        } else if trace.is_some() {
            let mut d = x.clone();
            if let Some(lin) = lin {
                d.axpy(sigma_hat * sigma_hat, lin.score());
            }
            let rn = residual(&d, y, coils)?.iter().map(KSpaceGrid::norm_sqr).sum::<f64>().sqrt();
            (d.norm(), rn)
        } else {
            (0.0, 0.0)
        };
        if !next.is_finite() {
            return Err(Error::NonFinite { step });
        }
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow { step, sigma: sigma_hat, denoised_norm, residual_norm });
        }
        x = next;
    }
    Ok(x)
}
