//! SSIM and PSNR on magnitude images.
//!
//! Both metrics divide the magnitudes of the two images by the maximum
//! magnitude of the reference, so the reference peaks at 1.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ComplexImage;

pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Value written to CSV in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 200.0;

fn normalized_magnitudes(reference: &ComplexImage, rec: &ComplexImage) -> Result<(Vec<f64>, Vec<f64>)> {
    rec.check_shape(reference.shape())?;
    let peak = reference.data().iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::Degenerate("reference image is identically zero".into()));
    }
    let a = reference.data().iter().map(|v| v.norm() / peak).collect();
    let b = rec.data().iter().map(|v| v.norm() / peak).collect();
    Ok((a, b))
}

/// Mean SSIM over all valid 7x7 windows (clipped to the image size), with
/// sample (co)variances and dynamic range 1.
pub fn ssim(reference: &ComplexImage, rec: &ComplexImage) -> Result<f64> {
    let (a, b) = normalized_magnitudes(reference, rec)?;
    let (h, w) = reference.shape();
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let cov_norm = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - wh {
        for c0 in 0..=w - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + wh {
                for c in c0..c0 + ww {
                    let (x, y) = (a[r * w + c], b[r * w + c]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (mx, my) = (sa / n, sb / n);
            let vx = cov_norm * (saa / n - mx * mx);
            let vy = cov_norm * (sbb / n - my * my);
            let vxy = cov_norm * (sab / n - mx * my);
            let num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `10 log10(peak^2 / MSE)` on normalized magnitudes (peak 1); identical
/// images give `+inf`.
pub fn psnr(reference: &ComplexImage, rec: &ComplexImage) -> Result<f64> {
    let (a, b) = normalized_magnitudes(reference, rec)?;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub mask_id: String,
    pub r: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: f64::NAN, std: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std =
        if n > 1 { (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Summary { mean, std, n }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn ssim_summary(&self) -> Summary {
        summarize(&self.rows.iter().map(|r| r.ssim).collect::<Vec<_>>())
    }

    /// Infinite PSNRs are capped before averaging.
    pub fn psnr_summary(&self) -> Summary {
        summarize(&self.rows.iter().map(|r| r.psnr.min(PSNR_CAP)).collect::<Vec<_>>())
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "image_id,mask_id,R,SSIM,PSNR")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.image_id, r.mask_id, r.r, r.ssim, r.psnr.min(PSNR_CAP))?;
        }
        Ok(())
    }
}
