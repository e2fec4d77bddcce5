//! Evaluation protocol shared by the command-line driver and the acceptance
//! suite: reconstruct-and-score loops, step-dependent `rho`, k-space
//! concentration measures and PGM renders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{acs_range, forward, is_acs_site, BinaryMask, CoilSet, PatternKind};
use crate::learner::MaskParams;
use crate::metrics::{psnr, ssim};
use crate::phantom::{gen_phantom, scale_to_range, PhantomSpec};
use crate::posterior::{sample_posterior, SamplerConfig, DEFAULT_RHO};
use crate::score::{DenoiserSpec, DenoiserTrainConfig, ScoreModel};
use crate::tensor::{ComplexImage, Rng};

/// Image side of the desk-scale experiments.
pub const DESK_SIZE: usize = 32;
pub const DESK_COILS: usize = 4;
/// Calibration widths at 32 pixels: two columns for LINE masks, a 4x4 block for POINT masks.
pub const LINE_ACS: usize = 2;
pub const POINT_ACS: usize = 4;
/// Number of phantoms the desk denoiser is fitted on.
pub const DESK_PRIOR_IMAGES: usize = 2000;

pub fn desk_acs(kind: PatternKind) -> usize {
    match kind {
        PatternKind::Line => LINE_ACS,
        PatternKind::Point => POINT_ACS,
    }
}

/// Two hidden layers of 64 units with `sigma_data = 0.3`.
pub fn desk_denoiser_config(height: usize, width: usize) -> Result<DenoiserTrainConfig> {
    let spec = DenoiserSpec::new(height, width, vec![64, 64], Some(0.3))?;
    Ok(DenoiserTrainConfig { epochs: 40, lr: 1e-3, ..DenoiserTrainConfig::new(spec) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub image: ComplexImage,
    pub ssim: f64,
    pub psnr: f64,
    /// `||rec - ref|| / ||ref||`
    pub rel_error: f64,
}

/// Reconstructs every image from `mask`-sampled multi-coil data. Image `i`
/// uses stream `Rng::new(seed).derive(i)` for its measurement noise and
/// sampler seed, so results do not depend on the order of evaluation.
pub fn evaluate_mask(
    score: &dyn ScoreModel,
    coils: &CoilSet,
    mask: &BinaryMask,
    images: &[ComplexImage],
    sampler: &SamplerConfig,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Reconstruction>> {
    if images.is_empty() {
        return Err(Error::invalid("no images to evaluate"));
    }
    let master = Rng::new(seed);
    images
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = master.derive(i as u64);
            let y = forward(x0, coils, mask, noise_std, &mut rng)?;
            let cfg = SamplerConfig { seed: rng.next_u64(), ..sampler.clone() };
            let image = sample_posterior(score, &y, coils, &cfg)?;
            let rel_error = (&image - x0).norm() / x0.norm().max(f64::MIN_POSITIVE);
            Ok(Reconstruction { ssim: ssim(x0, &image)?, psnr: psnr(x0, &image)?, rel_error, image })
        })
        .collect()
}

pub fn mean_ssim(recs: &[Reconstruction]) -> f64 {
    recs.iter().map(|r| r.ssim).sum::<f64>() / recs.len() as f64
}

/// `rho` for a given step count: fewer steps need larger corrections. The
/// anchor values are scaled by `DEFAULT_RHO / 10` and interpolated linearly.
pub fn rho_for_steps(steps: usize) -> f64 {
    const ANCHORS: [(usize, f64); 7] =
        [(25, 20.0), (100, 10.0), (200, 8.0), (400, 6.0), (600, 4.0), (800, 3.0), (1000, 2.0)];
    let scale = DEFAULT_RHO / 10.0;
    if steps <= ANCHORS[0].0 {
        return ANCHORS[0].1 * scale;
    }
    for pair in ANCHORS.windows(2) {
        let ((n0, r0), (n1, r1)) = (pair[0], pair[1]);
        if steps <= n1 {
            let t = (steps - n0) as f64 / (n1 - n0) as f64;
            return (r0 + t * (r1 - r0)) * scale;
        }
    }
    ANCHORS[ANCHORS.len() - 1].1 * scale
}

/// Whether a site lies in the central half-by-half block of k-space (the
/// central half of the columns for LINE patterns).
pub fn in_central_quarter(kind: PatternKind, height: usize, width: usize, site: usize) -> bool {
    let cols = acs_range(width, width / 2);
    match kind {
        PatternKind::Line => cols.contains(&site),
        PatternKind::Point => acs_range(height, height / 2).contains(&(site / width)) && cols.contains(&(site % width)),
    }
}

fn central_share(kind: PatternKind, h: usize, w: usize, acs: usize, weights: &[f64]) -> Option<f64> {
    let (mut central, mut total) = (0.0, 0.0);
    for (i, &v) in weights.iter().enumerate() {
        if is_acs_site(kind, h, w, acs, i) {
            continue;
        }
        total += v;
        if in_central_quarter(kind, h, w, i) {
            central += v;
        }
    }
    (total > 0.0).then(|| central / total)
}

/// Fraction of kept non-ACS sites that fall in the central quarter.
pub fn central_quarter_fraction(mask: &BinaryMask) -> Option<f64> {
    let weights: Vec<f64> = mask.sites().iter().map(|&k| k as u8 as f64).collect();
    central_share(mask.kind(), mask.height(), mask.width(), mask.acs_width(), &weights)
}

/// Expected version of [`central_quarter_fraction`] under the keep probabilities.
pub fn expected_central_fraction(params: &MaskParams) -> Result<Option<f64>> {
    let probs = params.probabilities()?;
    Ok(central_share(params.kind, params.height, params.width, params.acs_width, &probs))
}

/// Scaled phantoms from the stream `Rng::new(seed).derive(i)`.
pub fn phantom_images(spec: &PhantomSpec, n: usize, seed: u64) -> Result<Vec<ComplexImage>> {
    let master = Rng::new(seed);
    (0..n).map(|i| Ok(scale_to_range(&gen_phantom(spec, &mut master.derive(i as u64))?)?.0)).collect()
}

/// Gray-level window of a PGM render.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub min: f64,
    pub max: f64,
}

/// Binary 8-bit PGM (P5) of `values` (row-major `height x width`), linearly
/// windowed from the data min to max. The window goes in a header comment.
pub fn render_pgm(values: &[f64], height: usize, width: usize) -> Result<(Vec<u8>, Window)> {
    if values.len() != height * width || values.is_empty() {
        return Err(Error::DataLength { len: values.len(), height, width });
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::invalid("non-finite values in render"));
    }
    let window = Window { min, max };
    render_pgm_windowed(values, height, width, window).map(|bytes| (bytes, window))
}

pub fn render_pgm_windowed(values: &[f64], height: usize, width: usize, window: Window) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::DataLength { len: values.len(), height, width });
    }
    let mut out = format!("P5\n# window {} {}\n{} {}\n255\n", window.min, window.max, width, height).into_bytes();
    let span = window.max - window.min;
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - window.min) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn magnitudes(img: &ComplexImage) -> Vec<f64> {
    img.data().iter().map(|v| v.norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_schedule_anchors() {
        assert!((rho_for_steps(100) - DEFAULT_RHO).abs() < 1e-12);
        assert!((rho_for_steps(25) - 2.0 * DEFAULT_RHO).abs() < 1e-12);
        assert!((rho_for_steps(400) - 0.6 * DEFAULT_RHO).abs() < 1e-12);
        assert!((rho_for_steps(150) - 0.9 * DEFAULT_RHO).abs() < 1e-12);
        assert_eq!(rho_for_steps(1), rho_for_steps(25));
        assert_eq!(rho_for_steps(5000), rho_for_steps(1000));
    }

    #[test]
    fn central_fractions() {
        let keep: Vec<bool> = (0..16).map(|c| c == 2 || c == 6 || c == 7 || c == 8).collect();
        let m = BinaryMask::new(PatternKind::Line, 4, 16, keep, 2).unwrap();
        // ACS columns 7, 8 are ignored; column 6 is central (4..12), column 2 is not.
        assert_eq!(central_quarter_fraction(&m), Some(0.5));
        let only_acs = BinaryMask::new(PatternKind::Line, 4, 16, vec![false; 16], 2).unwrap();
        assert_eq!(central_quarter_fraction(&only_acs), None);
        let params = MaskParams::new(PatternKind::Point, 8, 8, 4.0, 2, 1.0).unwrap();
        // uniform probabilities: 16 central sites minus 4 ACS out of 60 non-ACS
        assert!((expected_central_fraction(&params).unwrap().unwrap() - 12.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_render() {
        let (bytes, window) = render_pgm(&[0.0, 0.5, 1.0, 2.0], 2, 2).unwrap();
        assert_eq!(window, Window { min: 0.0, max: 2.0 });
        let header = b"P5\n# window 0 2\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 64, 128, 255]);
        assert!(render_pgm(&[1.0], 2, 2).is_err());
    }
}
