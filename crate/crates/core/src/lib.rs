//! Learning k-space sub-sampling masks for compressed-sensing MRI from a
//! diffusion prior.
//!
//! Masks are trained by minimizing the error of a one-step, measurement-aware
//! posterior-mean estimate, and evaluated with a full stochastic posterior
//! sampler. See the README for the module map.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod learner;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod posterior;
pub mod score;
pub mod tensor;

pub use error::{Error, Result};
