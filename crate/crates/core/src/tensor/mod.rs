//! Complex 2-D grids, the centered orthonormal FFT and the seeded generator.
//!
//! Both [`ComplexImage`] and [`KSpaceGrid`] store `height * width` complex
//! values in row-major order. K-space grids are DC-centered: the zero
//! frequency sits at `(height / 2, width / 2)` (integer division) for every
//! producer and consumer in the crate.
//!
//! Gradients of real-valued functions of a complex image are packed as
//! `d/d re + i d/d im`, so the real inner product `Re <a, b>` pairs a gradient
//! with a perturbation.

mod fft;
mod rng;

pub use fft::{fft2_centered, ifft2_centered};
pub use num_complex::Complex64;
pub use rng::Rng;

use crate::error::{Error, Result};

macro_rules! complex_grid {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            height: usize,
            width: usize,
            data: Vec<Complex64>,
        }

        impl $name {
            pub fn zeros(height: usize, width: usize) -> Self {
                Self { height, width, data: vec![Complex64::new(0.0, 0.0); height * width] }
            }

            pub fn from_vec(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
                if height == 0 || width == 0 {
                    return Err(Error::EmptyGrid);
                }
                if data.len() != height * width {
                    return Err(Error::DataLength { len: data.len(), height, width });
                }
                Ok(Self { height, width, data })
            }

            /// Builds a grid from a `(row, col)` generator.
            pub fn from_fn(
                height: usize,
                width: usize,
                mut f: impl FnMut(usize, usize) -> Complex64,
            ) -> Self {
                let mut data = Vec::with_capacity(height * width);
                for r in 0..height {
                    for c in 0..width {
                        data.push(f(r, c));
                    }
                }
                Self { height, width, data }
            }

            /// Grid from real values (imaginary parts zero).
            pub fn from_real(height: usize, width: usize, values: &[f64]) -> Result<Self> {
                Self::from_vec(height, width, values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
            }

            #[inline]
            pub fn height(&self) -> usize {
                self.height
            }

            #[inline]
            pub fn width(&self) -> usize {
                self.width
            }

            #[inline]
            pub fn shape(&self) -> (usize, usize) {
                (self.height, self.width)
            }

            #[inline]
            pub fn len(&self) -> usize {
                self.data.len()
            }

            #[inline]
            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            #[inline]
            pub fn data(&self) -> &[Complex64] {
                &self.data
            }

            #[inline]
            pub fn data_mut(&mut self) -> &mut [Complex64] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<Complex64> {
                self.data
            }

            #[inline]
            pub fn get(&self, row: usize, col: usize) -> Complex64 {
                self.data[row * self.width + col]
            }

            #[inline]
            pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
                self.data[row * self.width + col] = value;
            }

            pub fn check_shape(&self, expected: (usize, usize)) -> Result<()> {
                if self.shape() != expected {
                    return Err(Error::ShapeMismatch { expected, got: self.shape() });
                }
                Ok(())
            }

            pub fn norm_sqr(&self) -> f64 {
                self.data.iter().map(|v| v.norm_sqr()).sum()
            }

            pub fn norm(&self) -> f64 {
                self.norm_sqr().sqrt()
            }

            /// Hermitian inner product `sum conj(self) * other`.
            pub fn inner(&self, other: &Self) -> Complex64 {
                assert_eq!(self.shape(), other.shape(), "inner product shape mismatch");
                self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
            }

            /// Real inner product of the two-channel representations.
            pub fn real_dot(&self, other: &Self) -> f64 {
                self.inner(other).re
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
            }

            pub fn map(&self, mut f: impl FnMut(Complex64) -> Complex64) -> Self {
                Self {
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().map(|&v| f(v)).collect(),
                }
            }

            pub fn zip_map(
                &self,
                other: &Self,
                mut f: impl FnMut(Complex64, Complex64) -> Complex64,
            ) -> Self {
                assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
                Self {
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
                }
            }

            /// `self += alpha * x`
            pub fn axpy(&mut self, alpha: f64, x: &Self) {
                assert_eq!(self.shape(), x.shape(), "axpy shape mismatch");
                for (a, b) in self.data.iter_mut().zip(&x.data) {
                    *a += b * alpha;
                }
            }

            pub fn scaled(&self, alpha: f64) -> Self {
                self.map(|v| v * alpha)
            }

            /// Planar real layout: all real parts followed by all imaginary parts.
            pub fn to_channels(&self) -> Vec<f64> {
                let mut out = Vec::with_capacity(2 * self.data.len());
                out.extend(self.data.iter().map(|v| v.re));
                out.extend(self.data.iter().map(|v| v.im));
                out
            }

            pub fn from_channels(height: usize, width: usize, channels: &[f64]) -> Result<Self> {
                let n = height * width;
                if channels.len() != 2 * n {
                    return Err(Error::DataLength { len: channels.len() / 2, height, width });
                }
                let data = (0..n).map(|i| Complex64::new(channels[i], channels[n + i])).collect();
                Self::from_vec(height, width, data)
            }
        }

        impl std::ops::Add<&$name> for &$name {
            type Output = $name;
            fn add(self, rhs: &$name) -> $name {
                self.zip_map(rhs, |a, b| a + b)
            }
        }

        impl std::ops::Sub<&$name> for &$name {
            type Output = $name;
            fn sub(self, rhs: &$name) -> $name {
                self.zip_map(rhs, |a, b| a - b)
            }
        }

        impl std::ops::Mul<f64> for &$name {
            type Output = $name;
            fn mul(self, rhs: f64) -> $name {
                self.scaled(rhs)
            }
        }

        impl std::ops::AddAssign<&$name> for $name {
            fn add_assign(&mut self, rhs: &$name) {
                self.axpy(1.0, rhs);
            }
        }

        impl std::ops::SubAssign<&$name> for $name {
            fn sub_assign(&mut self, rhs: &$name) {
                self.axpy(-1.0, rhs);
            }
        }
    };
}

complex_grid!(
    /// An `H x W` complex image (two real channels).
    ComplexImage
);

complex_grid!(
    /// An `H x W` DC-centered Fourier grid.
    KSpaceGrid
);

/// Complex Gaussian image whose entries have variance `std^2` in total,
/// split evenly between the real and imaginary parts.
pub fn gaussian_complex(rng: &mut Rng, height: usize, width: usize, std: f64) -> Result<ComplexImage> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!("noise std must be finite and >= 0, got {std}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::EmptyGrid);
    }
    if std == 0.0 {
        return Ok(ComplexImage::zeros(height, width));
    }
    let part = std / std::f64::consts::SQRT_2;
    Ok(ComplexImage::from_fn(height, width, |_, _| {
        let re = rng.normal();
        let im = rng.normal();
        Complex64::new(re * part, im * part)
    }))
}

/// Image whose real and imaginary channels are independent `N(0, 1)` draws.
///
/// This is the diffusion-noise convention: `x_t = x_0 + sigma * eps` has
/// per-channel variance `sigma^2`.
pub fn standard_normal_channels(rng: &mut Rng, height: usize, width: usize) -> ComplexImage {
    ComplexImage::from_fn(height, width, |_, _| {
        let re = rng.normal();
        let im = rng.normal();
        Complex64::new(re, im)
    })
}
