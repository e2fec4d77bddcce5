//! Small fully connected denoiser trained by denoising score matching.
//!
//! The network predicts the clean image, `D(x, sigma) = c_skip x + c_out N(c_in x, ln(sigma)/4)`,
//! and the score follows as `(D - x) / sigma^2`. With `sigma_data = None` the
//! scalings are all one, so a zeroed network is the identity denoiser.
//!
//! Gradients are computed layer by layer by hand: weight gradients for
//! training, and input-space VJP/JVP products for the posterior machinery.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use super::{ScoreLinearization, ScoreModel, SigmaSampler};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::{standard_normal_channels, ComplexImage, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub height: usize,
    pub width: usize,
    pub hidden: Vec<usize>,
    /// Data scale for the skip/output/input scalings; `None` disables them.
    pub sigma_data: Option<f64>,
}

impl DenoiserSpec {
    pub fn new(height: usize, width: usize, hidden: Vec<usize>, sigma_data: Option<f64>) -> Result<Self> {
        let spec = Self { height, width, hidden, sigma_data };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::EmptyGrid);
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("denoiser needs at least one nonempty hidden layer"));
        }
        if let Some(sd) = self.sigma_data {
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::invalid("sigma_data must be positive"));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        2 * self.height * self.width
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.channels() + 1;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.channels()));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// `(c_skip, c_out, c_in)` at noise level `sigma`.
    pub fn scalings(&self, sigma: f64) -> (f64, f64, f64) {
        match self.sigma_data {
            None => (1.0, 1.0, 1.0),
            Some(sd) => {
                let total = sigma * sigma + sd * sd;
                (sd * sd / total, sigma * sd / total.sqrt(), 1.0 / total.sqrt())
            }
        }
    }
}

fn noise_embedding(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * logistic(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = logistic(z);
    s * (1.0 + z * (1.0 - s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    spec: DenoiserSpec,
    params: Vec<f64>,
}

/// Activations of one sample's forward pass.
struct Trace {
    // pre-activations of the hidden layers
    pre: Vec<Array1<f64>>,
    output: Array1<f64>,
}

impl DenoiserNet {
    /// All parameters zero; with `sigma_data = None` this is `D(x) = x`.
    pub fn zeroed(spec: DenoiserSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![0.0; spec.param_count()];
        Ok(Self { spec, params })
    }

    /// LeCun-normal weights, zero biases.
    pub fn init(spec: DenoiserSpec, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        let mut off = 0;
        for (fan_in, fan_out) in net.spec.layer_dims() {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = scale * rng.normal();
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(spec: DenoiserSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::invalid(format!("expected {} parameters, got {}", spec.param_count(), params.len())));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let dims = self.spec.layer_dims();
        let off: usize = dims[..l].iter().map(|(i, o)| i * o + o).sum();
        let (fan_in, fan_out) = dims[l];
        let w =
            ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out]).expect("layer shape");
        let b = ArrayView1::from(&self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
        (w, b)
    }

    fn layers(&self) -> Vec<(ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        (0..self.spec.hidden.len() + 1).map(|l| self.layer(l)).collect()
    }

    fn check_input(&self, x: &ComplexImage, sigma: f64) -> Result<()> {
        x.check_shape((self.spec.height, self.spec.width))?;
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("denoiser needs sigma > 0, got {sigma}")));
        }
        Ok(())
    }

    fn trace(&self, x: &ComplexImage, sigma: f64) -> Trace {
        let (_, _, c_in) = self.spec.scalings(sigma);
        let mut input: Vec<f64> = x.to_channels().into_iter().map(|v| v * c_in).collect();
        input.push(noise_embedding(sigma));
        let layers = self.layers();
        let mut a = Array1::from(input);
        let mut pre = Vec::with_capacity(layers.len() - 1);
        for (l, (w, b)) in layers.iter().enumerate() {
            let z = w.dot(&a) + b;
            if l + 1 == layers.len() {
                return Trace { pre, output: z };
            }
            a = z.mapv(silu);
            pre.push(z);
        }
        unreachable!("network has an output layer")
    }

    /// Clean-image prediction `D(x, sigma)`.
    pub fn denoise(&self, x: &ComplexImage, sigma: f64) -> Result<ComplexImage> {
        self.check_input(x, sigma)?;
        let trace = self.trace(x, sigma);
        self.assemble(x, sigma, &trace)
    }

    fn assemble(&self, x: &ComplexImage, sigma: f64, trace: &Trace) -> Result<ComplexImage> {
        let (c_skip, c_out, _) = self.spec.scalings(sigma);
        let xs = x.to_channels();
        let d: Vec<f64> = xs.iter().zip(trace.output.iter()).map(|(xv, n)| c_skip * xv + c_out * n).collect();
        ComplexImage::from_channels(self.spec.height, self.spec.width, &d)
    }

    /// `J^T g` for the network output with respect to its image inputs.
    fn input_vjp(&self, trace: &Trace, g: &[f64]) -> Vec<f64> {
        let layers = self.layers();
        let mut grad = Array1::from(g.to_vec());
        for l in (0..layers.len()).rev() {
            if l + 1 < layers.len() {
                grad.zip_mut_with(&trace.pre[l], |gv, &z| *gv *= silu_grad(z));
            }
            grad = layers[l].0.t().dot(&grad);
        }
        let mut out = grad.to_vec();
        out.truncate(self.spec.channels());
        out
    }

    /// `J t` for an image-space tangent `t` (the noise embedding is held fixed).
    fn input_jvp(&self, trace: &Trace, t: &[f64]) -> Vec<f64> {
        let layers = self.layers();
        let mut tan = Array1::from(t.to_vec());
        tan.append(Axis(0), ArrayView1::from(&[0.0])).expect("append embedding tangent");
        for (l, (w, _)) in layers.iter().enumerate() {
            tan = w.dot(&tan);
            if l + 1 < layers.len() {
                tan.zip_mut_with(&trace.pre[l], |tv, &z| *tv *= silu_grad(z));
            }
        }
        tan.to_vec()
    }

    /// Mean over `batch` of `||D - x0||^2 / sigma^2`, and optionally its gradient.
    fn batch_loss(&self, batch: &[(&ComplexImage, f64, &ComplexImage)], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let layers = self.layers();
        let bsz = batch.len();
        let ch = self.spec.channels();
        let mut input = Array2::<f64>::zeros((bsz, ch + 1));
        let mut clean = Array2::<f64>::zeros((bsz, ch));
        let mut noisy = Array2::<f64>::zeros((bsz, ch));
        let mut coefs = Vec::with_capacity(bsz);
        for (i, (x0, sigma, eps)) in batch.iter().enumerate() {
            let (c_skip, c_out, c_in) = self.spec.scalings(*sigma);
            coefs.push((c_skip, c_out, *sigma));
            let x0c = x0.to_channels();
            let ec = eps.to_channels();
            for j in 0..ch {
                let xt = x0c[j] + sigma * ec[j];
                noisy[[i, j]] = xt;
                clean[[i, j]] = x0c[j];
                input[[i, j]] = c_in * xt;
            }
            input[[i, ch]] = noise_embedding(*sigma);
        }

        let mut acts = vec![input];
        let mut pres = Vec::new();
        for (l, (w, b)) in layers.iter().enumerate() {
            let z = acts[l].dot(&w.t()) + b;
            if l + 1 == layers.len() {
                acts.push(z);
            } else {
                acts.push(z.mapv(silu));
                pres.push(z);
            }
        }
        let out = acts.last().expect("output");

        let mut loss = 0.0;
        let mut grad_out = Array2::<f64>::zeros((bsz, ch));
        for i in 0..bsz {
            let (c_skip, c_out, sigma) = coefs[i];
            let inv_s2 = 1.0 / (sigma * sigma);
            for j in 0..ch {
                let r = c_skip * noisy[[i, j]] + c_out * out[[i, j]] - clean[[i, j]];
                loss += r * r * inv_s2;
                grad_out[[i, j]] = 2.0 * r * inv_s2 * c_out / bsz as f64;
            }
        }
        loss /= bsz as f64;
        if !want_grad {
            return (loss, None);
        }

        let mut grads = vec![0.0; self.params.len()];
        let dims = self.spec.layer_dims();
        let mut offs = Vec::with_capacity(dims.len());
        let mut off = 0;
        for (i, o) in &dims {
            offs.push(off);
            off += i * o + o;
        }
        let mut delta = grad_out;
        for l in (0..layers.len()).rev() {
            if l + 1 < layers.len() {
                delta.zip_mut_with(&pres[l], |d, &z| *d *= silu_grad(z));
            }
            let (fan_in, fan_out) = dims[l];
            let o = offs[l];
            let (wpart, rest) = grads[o..o + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            let mut gw = ArrayViewMut2::from_shape((fan_out, fan_in), wpart).expect("grad shape");
            gw.assign(&delta.t().dot(&acts[l]));
            let mut gb = ArrayViewMut1::from(rest);
            gb.assign(&delta.sum_axis(Axis(0)));
            if l > 0 {
                delta = delta.dot(&layers[l].0);
            }
        }
        (loss, Some(grads))
    }
}

struct NetLinearization<'a> {
    net: &'a DenoiserNet,
    trace: Trace,
    sigma: f64,
    score: ComplexImage,
}

impl NetLinearization<'_> {
    fn combine(&self, v: &ComplexImage, net_part: Vec<f64>) -> Result<ComplexImage> {
        let (c_skip, c_out, c_in) = self.net.spec.scalings(self.sigma);
        let s2 = self.sigma * self.sigma;
        let a = (c_skip - 1.0) / s2;
        let b = c_out * c_in / s2;
        let vc = v.to_channels();
        let out: Vec<f64> = vc.iter().zip(&net_part).map(|(vv, n)| a * vv + b * n).collect();
        ComplexImage::from_channels(v.height(), v.width(), &out)
    }
}

impl ScoreLinearization for NetLinearization<'_> {
    fn score(&self) -> &ComplexImage {
        &self.score
    }

    fn vjp(&self, v: &ComplexImage) -> Result<ComplexImage> {
        v.check_shape(self.score.shape())?;
        let part = self.net.input_vjp(&self.trace, &v.to_channels());
        self.combine(v, part)
    }

    fn jvp(&self, v: &ComplexImage) -> Result<ComplexImage> {
        v.check_shape(self.score.shape())?;
        let part = self.net.input_jvp(&self.trace, &v.to_channels());
        self.combine(v, part)
    }
}

impl ScoreModel for DenoiserNet {
    fn linearize<'a>(&'a self, x: &ComplexImage, sigma: f64) -> Result<Box<dyn ScoreLinearization + 'a>> {
        self.check_input(x, sigma)?;
        let trace = self.trace(x, sigma);
        let d = self.assemble(x, sigma, &trace)?;
        let score = (&d - x).scaled(1.0 / (sigma * sigma));
        Ok(Box::new(NetLinearization { net: self, trace, sigma, score }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub spec: DenoiserSpec,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub probe_size: usize,
    pub sigma: SigmaSampler,
}

impl DenoiserTrainConfig {
    pub fn new(spec: DenoiserSpec) -> Self {
        Self { spec, epochs: 40, lr: 1e-3, batch_size: 32, probe_size: 64, sigma: SigmaSampler::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub probe_initial: f64,
    pub probe_final: f64,
    pub steps: usize,
}

/// Fits a [`DenoiserNet`] by regressing `D(x0 + sigma eps, sigma)` onto `x0`
/// with weight `1 / sigma^2`, the denoiser form of score matching.
///
/// The probe loss is evaluated on a batch of `(x0, sigma, eps)` triples fixed
/// before training.
pub fn train_denoiser(
    dataset: &[ComplexImage],
    cfg: &DenoiserTrainConfig,
    rng: &mut Rng,
) -> Result<(DenoiserNet, DenoiserTrainReport)> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 || cfg.probe_size == 0 {
        return Err(Error::invalid("learning rate, batch size and probe size must be positive"));
    }
    let shape = (cfg.spec.height, cfg.spec.width);
    for img in dataset {
        img.check_shape(shape)?;
    }
    let mut net = DenoiserNet::init(cfg.spec.clone(), &mut rng.derive(0))?;

    let mut probe_rng = rng.derive(1);
    let probe: Vec<(usize, f64, ComplexImage)> = (0..cfg.probe_size)
        .map(|_| {
            let idx = probe_rng.below(dataset.len());
            let sigma = cfg.sigma.sample(&mut probe_rng);
            (idx, sigma, standard_normal_channels(&mut probe_rng, shape.0, shape.1))
        })
        .collect();
    let probe_loss = |net: &DenoiserNet| {
        let batch: Vec<_> = probe.iter().map(|(i, s, e)| (&dataset[*i], *s, e)).collect();
        net.batch_loss(&batch, false).0
    };

    let mut report = DenoiserTrainReport { probe_initial: probe_loss(&net), ..Default::default() };
    let mut adam = AdamState::new(net.params.len());
    let mut train_rng = rng.derive(2);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _epoch in 0..cfg.epochs {
        train_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let draws: Vec<(f64, ComplexImage)> = chunk
                .iter()
                .map(|_| {
                    let sigma = cfg.sigma.sample(&mut train_rng);
                    (sigma, standard_normal_channels(&mut train_rng, shape.0, shape.1))
                })
                .collect();
            let batch: Vec<_> = chunk.iter().zip(&draws).map(|(&i, (s, e))| (&dataset[i], *s, e)).collect();
            let (loss, grads) = net.batch_loss(&batch, true);
            if !loss.is_finite() {
                return Err(Error::Divergence { step: report.steps, detail: format!("loss = {loss}") });
            }
            adam.update(&mut net.params, &grads.expect("gradient requested"), cfg.lr);
            if !net.params_finite() {
                return Err(Error::Divergence { step: report.steps, detail: "non-finite weights".into() });
            }
            report.steps += 1;
            total += loss;
            batches += 1;
        }
        report.epoch_losses.push(total / batches as f64);
    }
    report.probe_final = probe_loss(&net);
    Ok((net, report))
}
