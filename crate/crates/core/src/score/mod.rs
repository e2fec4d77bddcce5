//! Score-function providers and the noise-level machinery.
//!
//! Every provider exposes the score `grad log p_sigma(x)` and its Jacobian
//! through a [`ScoreLinearization`], so that one forward evaluation can serve
//! both vector-Jacobian and Jacobian-vector products.

mod checkpoint;
mod denoiser;
mod gmm;
mod schedule;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use denoiser::{train_denoiser, DenoiserNet, DenoiserSpec, DenoiserTrainConfig, DenoiserTrainReport};
pub use gmm::GmmPrior;
pub use schedule::{NoiseSchedule, SigmaSampler};

use crate::error::Result;
use crate::tensor::ComplexImage;

/// The score and its Jacobian `ds/dx` at a fixed `(x, sigma)`.
pub trait ScoreLinearization {
    fn score(&self) -> &ComplexImage;

    /// `v^T (ds/dx)`
    fn vjp(&self, v: &ComplexImage) -> Result<ComplexImage>;

    /// `(ds/dx) v`
    fn jvp(&self, v: &ComplexImage) -> Result<ComplexImage>;
}

pub trait ScoreModel: Send + Sync {
    fn linearize<'a>(&'a self, x: &ComplexImage, sigma: f64) -> Result<Box<dyn ScoreLinearization + 'a>>;

    fn score(&self, x: &ComplexImage, sigma: f64) -> Result<ComplexImage> {
        Ok(self.linearize(x, sigma)?.score().clone())
    }

    fn score_vjp(&self, x: &ComplexImage, sigma: f64, v: &ComplexImage) -> Result<ComplexImage> {
        self.linearize(x, sigma)?.vjp(v)
    }

    fn score_jvp(&self, x: &ComplexImage, sigma: f64, v: &ComplexImage) -> Result<ComplexImage> {
        self.linearize(x, sigma)?.jvp(v)
    }
}
