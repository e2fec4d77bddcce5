use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Decreasing noise levels `sigma_{t_N} = sigma_max > ... > sigma_{t_0} = sigma_min`
/// with the identification `sigma_t = t`, spaced by the polynomial rule with
/// exponent `rho`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub steps: usize,
    pub rho: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_min: 0.002, sigma_max: 80.0, steps: 100, rho: 7.0 }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, steps: usize) -> Result<Self> {
        let s = Self { sigma_min, sigma_max, steps, ..Self::default() };
        s.validate()?;
        Ok(s)
    }

    pub fn with_steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 <= sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid("schedule exponent must be positive"));
        }
        Ok(())
    }

    /// `steps + 1` levels in sampling order: `[sigma_{t_N}, ..., sigma_{t_0}]`.
    pub fn sigmas(&self) -> Vec<f64> {
        let n = self.steps;
        let inv = 1.0 / self.rho;
        let (a, b) = (self.sigma_max.powf(inv), self.sigma_min.powf(inv));
        let mut out: Vec<f64> = (0..=n).map(|j| (a + j as f64 / n as f64 * (b - a)).powf(self.rho)).collect();
        // Pin the endpoints exactly.
        out[0] = self.sigma_max;
        out[n] = self.sigma_min;
        out
    }
}

/// Log-normal noise-level distribution, `ln sigma ~ N(p_mean, p_std^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSampler {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for SigmaSampler {
    fn default() -> Self {
        Self { p_mean: -1.2, p_std: 1.2 }
    }
}

impl SigmaSampler {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        (self.p_mean + self.p_std * rng.normal()).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_monotonicity() {
        for steps in [1, 2, 25, 100, 1000] {
            let s = NoiseSchedule::with_steps(steps).sigmas();
            assert_eq!(s.len(), steps + 1);
            assert_eq!(s[0], 80.0);
            assert_eq!(s[steps], 0.002);
            assert!(s.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn zero_sigma_min_allowed() {
        let s = NoiseSchedule::new(0.0, 10.0, 5).unwrap().sigmas();
        assert_eq!(s[5], 0.0);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        assert!(NoiseSchedule::new(1.0, 1.0, 5).is_err());
        assert!(NoiseSchedule::new(0.1, 1.0, 0).is_err());
    }

    #[test]
    fn lognormal_moments() {
        let sampler = SigmaSampler::default();
        let mut rng = Rng::new(12);
        let n = 100_000;
        let logs: Vec<f64> =
            (0..n).map(|_| sampler.sample(&mut rng)).inspect(|s| assert!(*s > 0.0)).map(f64::ln).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let se = 1.2 / (n as f64).sqrt();
        assert!((mean + 1.2).abs() < 3.0 * se, "mean ln sigma {mean}");
    }
}
