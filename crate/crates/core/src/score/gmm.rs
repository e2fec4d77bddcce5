use super::{ScoreLinearization, ScoreModel};
use crate::error::{Error, Result};
use crate::tensor::ComplexImage;

/// Isotropic Gaussian mixture over images, treated as real vectors of
/// dimension `2 * H * W`.
///
/// Noising with per-channel variance `sigma^2` keeps it a mixture, with
/// component variances `s_k^2 + sigma^2`, so its score is exact at every
/// noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<ComplexImage>,
    variances: Vec<f64>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<ComplexImage>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::invalid("mixture needs matching, nonempty weights/means/variances"));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("component variances must be finite and >= 0"));
        }
        let shape = means[0].shape();
        for m in &means {
            m.check_shape(shape)?;
        }
        Ok(Self { weights, means, variances })
    }

    /// Single isotropic Gaussian `N(mean, variance I)`.
    pub fn gaussian(mean: ComplexImage, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    /// Equal-weight mixture centered on each image (a kernel density estimate).
    pub fn from_images(images: &[ComplexImage], variance: f64) -> Result<Self> {
        let k = images.len();
        if k == 0 {
            return Err(Error::invalid("no images for mixture"));
        }
        let mut weights = vec![1.0 / k as f64; k];
        // Absorb rounding so the weights sum to 1 within the invariant.
        let drift: f64 = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        Self::new(weights, images.to_vec(), vec![variance; k])
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[ComplexImage] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn shape(&self) -> (usize, usize) {
        self.means[0].shape()
    }

    fn noisy_variances(&self, sigma: f64) -> Result<Vec<f64>> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        let v: Vec<f64> = self.variances.iter().map(|s2| s2 + sigma * sigma).collect();
        if v.contains(&0.0) {
            return Err(Error::DegenerateCovariance);
        }
        Ok(v)
    }

    /// Per-component log of `w_k N(x; mu_k, v_k I)`.
    fn log_terms(&self, x: &ComplexImage, vars: &[f64]) -> Vec<f64> {
        let dim = 2.0 * x.len() as f64;
        self.means
            .iter()
            .zip(vars)
            .zip(&self.weights)
            .map(|((mu, &v), &w)| {
                let d2 = (x - mu).norm_sqr();
                w.ln() - 0.5 * dim * (std::f64::consts::TAU * v).ln() - d2 / (2.0 * v)
            })
            .collect()
    }

    /// `log p_sigma(x)` of the noised mixture.
    pub fn log_density(&self, x: &ComplexImage, sigma: f64) -> Result<f64> {
        x.check_shape(self.shape())?;
        let vars = self.noisy_variances(sigma)?;
        let terms = self.log_terms(x, &vars);
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }

    /// Posterior responsibilities of each component given a noisy `x`.
    pub fn responsibilities(&self, x: &ComplexImage, sigma: f64) -> Result<Vec<f64>> {
        x.check_shape(self.shape())?;
        let vars = self.noisy_variances(sigma)?;
        let terms = self.log_terms(x, &vars);
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
        let total: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= total);
        Ok(r)
    }
}

struct GmmLinearization {
    resp: Vec<f64>,
    inv_vars: Vec<f64>,
    // (mu_k - x) / v_k for every component with nonzero responsibility
    pulls: Vec<Option<ComplexImage>>,
    score: ComplexImage,
}

impl ScoreLinearization for GmmLinearization {
    fn score(&self) -> &ComplexImage {
        &self.score
    }

    // H v = sum_k r_k [ -v / v_k + g_k (g_k . v) ] - s (s . v); H is symmetric.
    fn vjp(&self, v: &ComplexImage) -> Result<ComplexImage> {
        v.check_shape(self.score.shape())?;
        let mean_inv: f64 = self.resp.iter().zip(&self.inv_vars).map(|(r, iv)| r * iv).sum();
        let mut out = v.scaled(-mean_inv);
        for (r, g) in self.resp.iter().zip(&self.pulls) {
            if let Some(g) = g {
                out.axpy(r * g.real_dot(v), g);
            }
        }
        out.axpy(-self.score.real_dot(v), &self.score);
        Ok(out)
    }

    fn jvp(&self, v: &ComplexImage) -> Result<ComplexImage> {
        self.vjp(v)
    }
}

impl ScoreModel for GmmPrior {
    fn linearize<'a>(&'a self, x: &ComplexImage, sigma: f64) -> Result<Box<dyn ScoreLinearization + 'a>> {
        let resp = self.responsibilities(x, sigma)?;
        let vars = self.noisy_variances(sigma)?;
        let (h, w) = x.shape();
        let mut score = ComplexImage::zeros(h, w);
        let pulls: Vec<Option<ComplexImage>> = self
            .means
            .iter()
            .zip(&vars)
            .zip(&resp)
            .map(|((mu, &v), &r)| {
                (r > 0.0).then(|| {
                    let g = (mu - x).scaled(1.0 / v);
                    score.axpy(r, &g);
                    g
                })
            })
            .collect();
        Ok(Box::new(GmmLinearization { inv_vars: vars.iter().map(|v| 1.0 / v).collect(), resp, pulls, score }))
    }
}
