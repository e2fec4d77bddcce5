use std::cell::RefCell;

use rustfft::{num_complex::Complex64, FftDirection, FftPlanner};

use super::{ComplexImage, KSpaceGrid};
use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

// fftshift moves index 0 to n/2; ifftshift is its inverse.
fn shift_index(i: usize, n: usize, inverse: bool) -> usize {
    let h = n / 2;
    if inverse {
        (i + h) % n
    } else {
        (i + n - h) % n
    }
}

fn roll2(data: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let sr = shift_index(r, h, inverse);
        for c in 0..w {
            out.push(data[sr * w + shift_index(c, w, inverse)]);
        }
    }
    out
}

fn transpose(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = data[r * w + c];
        }
    }
    out
}

fn fft_rows(data: &mut [Complex64], len: usize, direction: FftDirection) {
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft(len, direction);
        fft.process(data);
    });
}

/// Unnormalized 2-D transform of an uncentered buffer, then scaled by 1/sqrt(HW).
fn dft2_ortho(data: Vec<Complex64>, h: usize, w: usize, direction: FftDirection) -> Vec<Complex64> {
    let mut buf = data;
    fft_rows(&mut buf, w, direction);
    let mut t = transpose(&buf, h, w);
    fft_rows(&mut t, h, direction);
    let mut out = transpose(&t, w, h);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in &mut out {
        *v *= scale;
    }
    out
}

/// Unitary 2-D DFT with the zero frequency moved to `(H/2, W/2)`.
///
/// The image is also taken to be centered, so a delta at `(H/2, W/2)` maps to
/// a constant grid of magnitude `1/sqrt(HW)`.
pub fn fft2_centered(img: &ComplexImage) -> Result<KSpaceGrid> {
    let (h, w) = img.shape();
    if h == 0 || w == 0 {
        return Err(Error::EmptyGrid);
    }
    let uncentered = roll2(img.data(), h, w, true);
    let spectrum = dft2_ortho(uncentered, h, w, FftDirection::Forward);
    KSpaceGrid::from_vec(h, w, roll2(&spectrum, h, w, false))
}

/// Inverse of [`fft2_centered`]; also its adjoint.
pub fn ifft2_centered(grid: &KSpaceGrid) -> Result<ComplexImage> {
    let (h, w) = grid.shape();
    if h == 0 || w == 0 {
        return Err(Error::EmptyGrid);
    }
    let uncentered = roll2(grid.data(), h, w, true);
    let image = dft2_ortho(uncentered, h, w, FftDirection::Inverse);
    ComplexImage::from_vec(h, w, roll2(&image, h, w, false))
}
