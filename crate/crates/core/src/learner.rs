//! Learning sampling-mask distributions.
//!
//! Each site (a column for LINE patterns, a pixel for POINT patterns) has a
//! logit `theta_i`. Sigmoid probabilities are rescaled to mean `1/R`, hard
//! masks are drawn with the Gumbel straight-through estimator, and `theta` is
//! trained with Adam to minimize `||x0 - x0_tilde||^2`, where `x0_tilde` is the
//! one-step measurement-aware posterior mean from a noisy `x_t`.
//!
//! Training uses the coil-free operator `A = P F`. The mask enters the data
//! term linearly, `A^H A = F^H diag(m) F`, so with
//! `d = F x0_hat - F x0` and `W = F (I + sigma^2 ds/dx) e` for the error
//! `e = x0_tilde - x0`, the loss gradient with respect to the k-space weight
//! at pixel `k` is `-4 gamma Re(conj(W_k) d_k)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{forward, is_acs_site, BinaryMask, CoilSet, PatternKind};
use crate::optim::AdamState;
use crate::posterior::{sample_posterior, SamplerConfig};
use crate::score::{ScoreModel, SigmaSampler};
use crate::tensor::{
    fft2_centered, gaussian_complex, ifft2_centered, standard_normal_channels, ComplexImage, KSpaceGrid, Rng,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub kind: PatternKind,
    pub height: usize,
    pub width: usize,
    pub theta: Vec<f64>,
    pub target_r: f64,
    pub acs_width: usize,
    pub tau: f64,
}

impl MaskParams {
    /// Zero logits, i.e. uniform probabilities `1/R`.
    pub fn new(
        kind: PatternKind,
        height: usize,
        width: usize,
        target_r: f64,
        acs_width: usize,
        tau: f64,
    ) -> Result<Self> {
        let p = Self { kind, height, width, theta: vec![0.0; kind.sites(height, width)], target_r, acs_width, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::EmptyGrid);
        }
        if self.theta.len() != self.kind.sites(self.height, self.width) {
            return Err(Error::invalid(format!(
                "{} logits for a {}x{} {} pattern",
                self.theta.len(),
                self.height,
                self.width,
                self.kind.as_str()
            )));
        }
        if !(self.target_r > 1.0) || !self.target_r.is_finite() {
            return Err(Error::invalid(format!("target acceleration must exceed 1, got {}", self.target_r)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("non-finite logits"));
        }
        Ok(())
    }

    pub fn sites(&self) -> usize {
        self.theta.len()
    }

    pub fn is_acs(&self, site: usize) -> bool {
        is_acs_site(self.kind, self.height, self.width, self.acs_width, site)
    }

    /// Keep probabilities with mean `1/R`, before ACS forcing.
    pub fn probabilities(&self) -> Result<Vec<f64>> {
        renormalize_probs(&self.theta, self.target_r)
    }

    /// A hard mask drawn from the current distribution, ACS forced.
    pub fn sample_mask(&self, rng: &mut Rng) -> Result<BinaryMask> {
        let draw = gumbel_st_sample(&self.probabilities()?, self.tau, rng)?;
        BinaryMask::new(self.kind, self.height, self.width, apply_acs(&draw.hard, self), self.acs_width)
    }

    /// The ACS sites plus the most probable other sites, `round(n / R)` in
    /// total (or just the ACS sites if they already exceed that budget).
    /// Ties go to the lower site index.
    pub fn top_mask(&self) -> Result<BinaryMask> {
        let probs = self.probabilities()?;
        let budget = (self.sites() as f64 / self.target_r).round() as usize;
        let mut keep: Vec<bool> = (0..self.sites()).map(|i| self.is_acs(i)).collect();
        let forced = keep.iter().filter(|k| **k).count();
        let mut order: Vec<usize> = (0..self.sites()).filter(|&i| !keep[i]).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        for &i in order.iter().take(budget.saturating_sub(forced)) {
            keep[i] = true;
        }
        BinaryMask::new(self.kind, self.height, self.width, keep, self.acs_width)
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Rescales `sigmoid(theta)` to mean exactly `1/R`.
///
/// With `p_bar` the mean sigmoid: if `p_bar >= 1/R`, `p_i = s_i / (p_bar R)`;
/// otherwise `p_i = 1 - c (1 - s_i)` with `c = (R - 1) / (R (1 - p_bar))`.
pub fn renormalize_probs(theta: &[f64], target_r: f64) -> Result<Vec<f64>> {
    let (s, branch) = renorm_parts(theta, target_r)?;
    Ok(match branch {
        Branch::Upper(scale) => s.iter().map(|v| (v * scale).clamp(0.0, 1.0)).collect(),
        Branch::Lower(c) => s.iter().map(|v| (1.0 - c * (1.0 - v)).clamp(0.0, 1.0)).collect(),
    })
}

enum Branch {
    Upper(f64),
    Lower(f64),
}

fn renorm_parts(theta: &[f64], target_r: f64) -> Result<(Vec<f64>, Branch)> {
    if theta.is_empty() {
        return Err(Error::invalid("no mask sites"));
    }
    if !(target_r > 1.0) || !target_r.is_finite() {
        return Err(Error::invalid(format!("target acceleration must exceed 1, got {target_r}")));
    }
    let s: Vec<f64> = theta.iter().map(|&t| logistic(t)).collect();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let branch = if mean >= 1.0 / target_r {
        Branch::Upper(1.0 / (mean * target_r))
    } else {
        Branch::Lower((target_r - 1.0) / (target_r * (1.0 - mean)))
    };
    Ok((s, branch))
}

/// Pulls a gradient with respect to the renormalized probabilities back to `theta`.
pub fn renormalize_vjp(theta: &[f64], target_r: f64, grad_p: &[f64]) -> Result<Vec<f64>> {
    if grad_p.len() != theta.len() {
        return Err(Error::invalid("gradient length does not match logits"));
    }
    let (s, branch) = renorm_parts(theta, target_r)?;
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let grad_s: Vec<f64> = match branch {
        Branch::Upper(scale) => {
            let coupling = grad_p.iter().zip(&s).map(|(g, v)| g * v).sum::<f64>() * scale / (mean * n);
            grad_p.iter().map(|g| g * scale - coupling).collect()
        }
        Branch::Lower(c) => {
            let coupling = grad_p.iter().zip(&s).map(|(g, v)| g * (1.0 - v)).sum::<f64>() * c / ((1.0 - mean) * n);
            grad_p.iter().map(|g| g * c - coupling).collect()
        }
    };
    Ok(grad_s.iter().zip(&s).map(|(g, v)| g * v * (1.0 - v)).collect())
}

/// A Gumbel straight-through draw over all sites.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub hard: Vec<bool>,
    pub soft: Vec<f64>,
    /// `d soft_i / d p_i` at the drawn noise.
    pub grad_factor: Vec<f64>,
}

/// Logistic noise `g1 - g2` (difference of two standard Gumbels), one per site.
pub fn draw_gumbel_noise(sites: usize, rng: &mut Rng) -> Vec<f64> {
    (0..sites).map(|_| rng.gumbel() - rng.gumbel()).collect()
}

/// Relaxed and hard samples for frozen noise:
/// `soft = sigmoid((logit p + noise) / tau)`, `hard = [soft >= 1/2]`.
pub fn relax_gumbel(probs: &[f64], noise: &[f64], tau: f64) -> Result<GumbelSample> {
    if probs.len() != noise.len() {
        return Err(Error::invalid("noise length does not match probabilities"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let n = probs.len();
    let mut out =
        GumbelSample { hard: Vec::with_capacity(n), soft: Vec::with_capacity(n), grad_factor: Vec::with_capacity(n) };
    for (&p, &g) in probs.iter().zip(noise) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        if p == 0.0 || p == 1.0 {
            out.hard.push(p == 1.0);
            out.soft.push(p);
            out.grad_factor.push(0.0);
            continue;
        }
        let a = (p.ln() - (-p).ln_1p() + g) / tau;
        let y = logistic(a);
        out.hard.push(a >= 0.0);
        out.soft.push(y);
        out.grad_factor.push(y * (1.0 - y) / (tau * p * (1.0 - p)));
    }
    Ok(out)
}

pub fn gumbel_st_sample(probs: &[f64], tau: f64, rng: &mut Rng) -> Result<GumbelSample> {
    let noise = draw_gumbel_noise(probs.len(), rng);
    relax_gumbel(probs, &noise, tau)
}

/// Forces every calibration site of `params`' pattern on.
pub fn apply_acs(z: &[bool], params: &MaskParams) -> Vec<bool> {
    z.iter().enumerate().map(|(i, &k)| k || params.is_acs(i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub sigma: SigmaSampler,
    /// Complex measurement noise std during training and validation.
    pub noise_std: f64,
    pub fixed_sigma: Option<f64>,
    pub use_jacobian: bool,
    pub seed: u64,
    /// Validate after every `val_every`-th epoch (and after the last one).
    pub val_every: usize,
    pub validation: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-2,
            gamma: 1.0,
            sigma: SigmaSampler::default(),
            noise_std: 0.0,
            fixed_sigma: None,
            use_jacobian: true,
            seed: 0,
            val_every: 1,
            validation: SamplerConfig::new(100, crate::posterior::DEFAULT_RHO, 0.0, 0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.gamma >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::invalid("need lr > 0, gamma >= 0 and noise_std >= 0"));
        }
        if let Some(s) = self.fixed_sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::invalid(format!("fixed sigma must be positive, got {s}")));
            }
        }
        if self.val_every == 0 {
            return Err(Error::invalid("val_every must be at least 1"));
        }
        self.validation.validate()
    }
}

/// All randomness of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDraw {
    pub gumbel: Vec<f64>,
    pub meas_noise: Option<KSpaceGrid>,
    pub sigma: f64,
    pub eps: ComplexImage,
}

/// Draws, in order, the mask noise, the measurement noise, `sigma` and the diffusion noise.
pub fn draw_step(params: &MaskParams, cfg: &TrainConfig, rng: &mut Rng) -> Result<FrozenDraw> {
    let (h, w) = (params.height, params.width);
    let gumbel = draw_gumbel_noise(params.sites(), rng);
    let meas_noise = if cfg.noise_std > 0.0 {
        Some(KSpaceGrid::from_vec(h, w, gaussian_complex(rng, h, w, cfg.noise_std)?.into_vec())?)
    } else {
        None
    };
    let sigma = match cfg.fixed_sigma {
        Some(s) => s,
        None => cfg.sigma.sample(rng),
    };
    let eps = standard_normal_channels(rng, h, w);
    Ok(FrozenDraw { gumbel, meas_noise, sigma, eps })
}

/// Which mask the objective sees: the hard sample (training) or the relaxed one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    Hard,
    Relaxed,
}

#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub grad_theta: Vec<f64>,
    /// Site weights after ACS forcing.
    pub site_weights: Vec<f64>,
}

/// Training loss and its straight-through gradient with respect to `theta`.
pub fn mask_objective(
    params: &MaskParams,
    score: &dyn ScoreModel,
    x0: &ComplexImage,
    draw: &FrozenDraw,
    cfg: &TrainConfig,
    pathway: Pathway,
) -> Result<ObjectiveEval> {
    let (h, w) = (params.height, params.width);
    x0.check_shape((h, w))?;
    let probs = params.probabilities()?;
    let relax = relax_gumbel(&probs, &draw.gumbel, params.tau)?;
    let site_weights: Vec<f64> = (0..params.sites())
        .map(|i| {
            if params.is_acs(i) {
                1.0
            } else {
                match pathway {
                    Pathway::Hard => relax.hard[i] as u8 as f64,
                    Pathway::Relaxed => relax.soft[i],
                }
            }
        })
        .collect();
    let pixel_weight = |r: usize, c: usize| site_weights[params.kind.site_of(w, r, c)];

    let mut full = fft2_centered(x0)?;
    if let Some(n) = &draw.meas_noise {
        full += n;
    }
    let sigma = draw.sigma;
    let mut x_t = x0.clone();
    x_t.axpy(sigma, &draw.eps);
    let lin = score.linearize(&x_t, sigma)?;
    let mut x0_hat = x_t;
    x0_hat.axpy(sigma * sigma, lin.score());
    let d = &fft2_centered(&x0_hat)? - &full;
    let mut md = d.clone();
    for r in 0..h {
        for c in 0..w {
            md.set(r, c, md.get(r, c) * pixel_weight(r, c));
        }
    }
    let u = ifft2_centered(&md)?.scaled(2.0);
    let mut g = u.clone();
    if cfg.use_jacobian {
        g.axpy(sigma * sigma, &lin.vjp(&u)?);
    }
    let mut err = x0_hat;
    err.axpy(-cfg.gamma, &g);
    err -= x0;
    let loss = err.norm_sqr();
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!(
                "loss {loss} at sigma = {sigma}, mask density {:.4}",
                site_weights.iter().sum::<f64>() / site_weights.len() as f64
            ),
        });
    }

    let mut grad_sites = vec![0.0; params.sites()];
    if cfg.gamma != 0.0 {
        let mut je = err.clone();
        if cfg.use_jacobian {
            je.axpy(sigma * sigma, &lin.jvp(&err)?);
        }
        let wk = fft2_centered(&je)?;
        for r in 0..h {
            for c in 0..w {
                let site = params.kind.site_of(w, r, c);
                grad_sites[site] += -4.0 * cfg.gamma * (wk.get(r, c).conj() * d.get(r, c)).re;
            }
        }
    }
    let grad_p: Vec<f64> = grad_sites
        .iter()
        .enumerate()
        .map(|(i, g)| if params.is_acs(i) { 0.0 } else { g * relax.grad_factor[i] })
        .collect();
    let grad_theta = renormalize_vjp(&params.theta, params.target_r, &grad_p)?;
    Ok(ObjectiveEval { loss, grad_theta, site_weights })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: f64,
    pub sigma: f64,
    pub kept_sites: usize,
}

/// One Adam step on a single image.
pub fn training_step(
    params: &mut MaskParams,
    score: &dyn ScoreModel,
    x0: &ComplexImage,
    cfg: &TrainConfig,
    opt: &mut AdamState,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let draw = draw_step(params, cfg, rng)?;
    let eval = mask_objective(params, score, x0, &draw, cfg, Pathway::Hard)?;
    opt.update(&mut params.theta, &eval.grad_theta, cfg.lr);
    if params.theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Divergence {
            step: opt.step as usize,
            detail: format!("non-finite logits at sigma = {}", draw.sigma),
        });
    }
    Ok(StepOutcome {
        loss: eval.loss,
        sigma: draw.sigma,
        kept_sites: eval.site_weights.iter().filter(|w| **w > 0.5).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_error: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub log: Vec<LogRow>,
    /// `(epoch, mean validation error)` in order.
    pub validations: Vec<(usize, f64)>,
    pub best_epoch: Option<usize>,
    pub best_val_error: Option<f64>,
}

pub fn write_training_log(rows: &[LogRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "iteration,loss,epoch,val_error")?;
    for r in rows {
        let val = r.val_error.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.iteration, r.loss, r.epoch, val)?;
    }
    Ok(())
}

const VALIDATION_TAG: u64 = 0x7661_6c00_0000_0000;

/// Mean relative squared error `||x_rec - x0||^2 / ||x0||^2` over `val_set`,
/// reconstructing each image with the posterior sampler from a mask drawn
/// from `params`. Deterministic in `(cfg.seed, epoch)`.
pub fn validation_error(
    params: &MaskParams,
    val_set: &[ComplexImage],
    score: &dyn ScoreModel,
    coils: &CoilSet,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if val_set.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let stream = Rng::new(cfg.seed).derive(VALIDATION_TAG ^ epoch as u64);
    let mask = params.sample_mask(&mut stream.derive(u64::MAX))?;
    let mut total = 0.0;
    for (i, x0) in val_set.iter().enumerate() {
        let mut img_rng = stream.derive(i as u64);
        let y = forward(x0, coils, &mask, cfg.noise_std, &mut img_rng)?;
        let sampler = SamplerConfig { seed: img_rng.next_u64(), ..cfg.validation.clone() };
        let rec = sample_posterior(score, &y, coils, &sampler)?;
        total += (&rec - x0).norm_sqr() / x0.norm_sqr().max(f64::MIN_POSITIVE);
    }
    Ok(total / val_set.len() as f64)
}

/// Runs `epochs x |train_set|` single-image steps and returns the logits with
/// the lowest validation error (the final logits if nothing was validated).
pub fn learn_mask(
    init: MaskParams,
    train_set: &[ComplexImage],
    val_set: &[ComplexImage],
    score: &dyn ScoreModel,
    coils: &CoilSet,
    cfg: &TrainConfig,
) -> Result<(MaskParams, LearnReport)> {
    init.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut params = init;
    let mut opt = AdamState::new(params.sites());
    let mut report = LearnReport::default();
    let mut best: Option<MaskParams> = None;
    let master = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = master.derive(epoch as u64);
        rng.shuffle(&mut order);
        for &i in &order {
            let out =
                training_step(&mut params, score, &train_set[i], cfg, &mut opt, &mut rng).map_err(|e| match e {
                    Error::Divergence { detail, .. } => Error::Divergence { step: iteration, detail },
                    other => other,
                })?;
            report.log.push(LogRow { iteration, epoch, loss: out.loss, val_error: None });
            iteration += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if !val_set.is_empty() && ((epoch + 1) % cfg.val_every == 0 || last) {
            let err = validation_error(&params, val_set, score, coils, cfg, epoch)?;
            if let Some(row) = report.log.last_mut() {
                row.val_error = Some(err);
            }
            report.validations.push((epoch, err));
            if report.best_val_error.is_none_or(|b| err < b) {
                report.best_val_error = Some(err);
                report.best_epoch = Some(epoch);
                best = Some(params.clone());
            }
        }
    }
    Ok((best.unwrap_or(params), report))
}

pub const THETA_MAGIC: &[u8; 7] = b"DMTHETA";
const THETA_VERSION: u32 = 1;

/// Layout (little-endian): magic, u32 version, u8 kind (0 line, 1 point),
/// u32 height, u32 width, f64 R, u32 acs width, f64 tau, u64 count, f64 logits.
pub fn write_theta(params: &MaskParams, mut out: impl Write) -> Result<()> {
    out.write_all(THETA_MAGIC)?;
    out.write_all(&THETA_VERSION.to_le_bytes())?;
    out.write_all(&[matches!(params.kind, PatternKind::Point) as u8])?;
    out.write_all(&(params.height as u32).to_le_bytes())?;
    out.write_all(&(params.width as u32).to_le_bytes())?;
    out.write_all(&params.target_r.to_le_bytes())?;
    out.write_all(&(params.acs_width as u32).to_le_bytes())?;
    out.write_all(&params.tau.to_le_bytes())?;
    out.write_all(&(params.theta.len() as u64).to_le_bytes())?;
    for t in &params.theta {
        out.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_theta(mut input: impl Read) -> Result<MaskParams> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| Error::format("truncated mask-parameter file"))?;
        pos += n;
        Ok(s)
    };
    if take(7)? != THETA_MAGIC {
        return Err(Error::format("not a mask-parameter file"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().expect("8 bytes"));
    let version = u32_at(take(4)?);
    if version != THETA_VERSION {
        return Err(Error::format(format!("unsupported mask-parameter version {version}")));
    }
    let kind = match take(1)?[0] {
        0 => PatternKind::Line,
        1 => PatternKind::Point,
        k => return Err(Error::format(format!("bad pattern kind {k}"))),
    };
    let height = u32_at(take(4)?) as usize;
    let width = u32_at(take(4)?) as usize;
    let target_r = f64_at(take(8)?);
    let acs_width = u32_at(take(4)?) as usize;
    let tau = f64_at(take(8)?);
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    if count != kind.sites(height, width) {
        return Err(Error::format(format!("{count} logits for a {height}x{width} pattern")));
    }
    let theta = (0..count).map(|_| take(8).map(f64_at)).collect::<Result<Vec<_>>>()?;
    if pos != bytes.len() {
        return Err(Error::format("trailing bytes after mask parameters"));
    }
    let params = MaskParams { kind, height, width, theta, target_r, acs_width, tau };
    params.validate().map_err(|e| Error::format(e.to_string()))?;
    Ok(params)
}
