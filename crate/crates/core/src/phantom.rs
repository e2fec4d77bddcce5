//! Random-ellipse complex phantoms, [-1, 1] scaling, dataset splits and the
//! `CIMG1` image file format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Complex64, ComplexImage, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of the ellipse count.
    pub ellipses: (usize, usize),
    /// Range of the ellipse intensity magnitudes.
    pub intensity: (f64, f64),
    /// Scale of the smooth background phase, in radians.
    pub phase_amplitude: f64,
    /// Sub-samples per pixel side for edge anti-aliasing.
    pub supersample: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { height: 32, width: 32, ellipses: (3, 6), intensity: (0.2, 1.0), phase_amplitude: 1.0, supersample: 4 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::EmptyGrid);
        }
        if self.ellipses.0 > self.ellipses.1 {
            return Err(Error::invalid("ellipse count range is reversed"));
        }
        let (lo, hi) = self.intensity;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid("intensity range must satisfy 0 < lo <= hi"));
        }
        if !self.phase_amplitude.is_finite() || self.supersample == 0 {
            return Err(Error::invalid("phase amplitude must be finite and supersample >= 1"));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: Complex64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let du = u - self.cx;
        let dv = v - self.cy;
        let p = du * self.cos + dv * self.sin;
        let q = -du * self.sin + dv * self.cos;
        (p / self.a).powi(2) + (q / self.b).powi(2) <= 1.0
    }
}

/// Sum of anti-aliased ellipses with random complex intensities, times a
/// smooth quadratic phase. Coordinates run over `[-1, 1]` on both axes.
pub fn gen_phantom(spec: &PhantomSpec, rng: &mut Rng) -> Result<ComplexImage> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let count = spec.ellipses.0 + rng.below(spec.ellipses.1 - spec.ellipses.0 + 1);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let angle = rng.range(0.0, std::f64::consts::PI);
            let magnitude = rng.range(spec.intensity.0, spec.intensity.1);
            let phase = rng.range(0.0, std::f64::consts::TAU);
            Ellipse {
                cx: rng.range(-0.4, 0.4),
                cy: rng.range(-0.4, 0.4),
                a: rng.range(0.2, 0.6),
                b: rng.range(0.2, 0.6),
                cos: angle.cos(),
                sin: angle.sin(),
                value: Complex64::from_polar(magnitude, phase),
            }
        })
        .collect();
    let coeffs: Vec<f64> = (0..5).map(|_| spec.phase_amplitude * rng.normal() / 2.0).collect();

    let ss = spec.supersample;
    let weight = 1.0 / (ss * ss) as f64;
    let coord =
        |i: usize, n: usize, sub: usize| -> f64 { 2.0 * (i as f64 + (sub as f64 + 0.5) / ss as f64) / n as f64 - 1.0 };
    Ok(ComplexImage::from_fn(h, w, |r, c| {
        let mut acc = Complex64::new(0.0, 0.0);
        for e in &ellipses {
            let mut covered = 0usize;
            for sr in 0..ss {
                for sc in 0..ss {
                    if e.contains(coord(c, w, sc), coord(r, h, sr)) {
                        covered += 1;
                    }
                }
            }
            acc += e.value * (covered as f64 * weight);
        }
        let u = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
        let v = 2.0 * (r as f64 + 0.5) / h as f64 - 1.0;
        let phi = coeffs[0] * u + coeffs[1] * v + coeffs[2] * u * u + coeffs[3] * u * v + coeffs[4] * v * v;
        acc * Complex64::from_polar(1.0, phi)
    }))
}

/// The affine map used by [`scale_to_range`]: `v -> 2 (v - min) / (max - min) - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub min: f64,
    pub max: f64,
}

impl ScaleRecord {
    fn is_identity(&self) -> bool {
        self.min == -1.0 && self.max == 1.0
    }
}

/// Maps the real and imaginary channels jointly so their common minimum goes
/// to -1 and maximum to +1.
pub fn scale_to_range(img: &ComplexImage) -> Result<(ComplexImage, ScaleRecord)> {
    let values = img.data().iter().flat_map(|v| [v.re, v.im]);
    let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(max > min) || !min.is_finite() || !max.is_finite() {
        return Err(Error::Degenerate("cannot scale a constant image".into()));
    }
    let rec = ScaleRecord { min, max };
    if rec.is_identity() {
        return Ok((img.clone(), rec));
    }
    let f = |v: f64| 2.0 * (v - min) / (max - min) - 1.0;
    Ok((img.map(|v| Complex64::new(f(v.re), f(v.im))), rec))
}

pub fn unscale(img: &ComplexImage, rec: &ScaleRecord) -> ComplexImage {
    if rec.is_identity() {
        return img.clone();
    }
    let f = |v: f64| (v + 1.0) * (rec.max - rec.min) / 2.0 + rec.min;
    img.map(|v| Complex64::new(f(v.re), f(v.im)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ComplexImage,
    pub scale: ScaleRecord,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 20, val: 5, test: 20 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Phantom `i` (numbered across all splits) is drawn from `Rng::new(seed).derive(i)`
    /// and scaled to [-1, 1].
    pub fn generate(spec: &PhantomSpec, sizes: SplitSizes, seed: u64) -> Result<Self> {
        let master = Rng::new(seed);
        let make = |offset: usize, n: usize, prefix: &str| -> Result<Vec<Sample>> {
            (0..n)
                .map(|k| {
                    let i = offset + k;
                    let raw = gen_phantom(spec, &mut master.derive(i as u64))?;
                    let (image, scale) = scale_to_range(&raw)?;
                    Ok(Sample { id: format!("{prefix}{i:04}"), image, scale })
                })
                .collect()
        };
        Ok(Self {
            train: make(0, sizes.train, "train")?,
            val: make(sizes.train, sizes.val, "val")?,
            test: make(sizes.train + sizes.val, sizes.test, "test")?,
        })
    }

    pub fn images(samples: &[Sample]) -> Vec<ComplexImage> {
        samples.iter().map(|s| s.image.clone()).collect()
    }
}

pub const IMAGE_MAGIC: &[u8; 5] = b"CIMG1";

/// Magic, u32 height, u32 width, then `(re, im)` f64 pairs, all little-endian.
pub fn write_image(img: &ComplexImage, mut out: impl Write) -> Result<()> {
    out.write_all(IMAGE_MAGIC)?;
    out.write_all(&(img.height() as u32).to_le_bytes())?;
    out.write_all(&(img.width() as u32).to_le_bytes())?;
    for v in img.data() {
        out.write_all(&v.re.to_le_bytes())?;
        out.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_image(mut input: impl Read) -> Result<ComplexImage> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 13 || &bytes[..5] != IMAGE_MAGIC {
        return Err(Error::format("not a CIMG1 image"));
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let body = &bytes[13..];
    if body.len() != h * w * 16 {
        return Err(Error::format(format!("{h}x{w} image needs {} payload bytes, found {}", h * w * 16, body.len())));
    }
    let data = body
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
            )
        })
        .collect();
    ComplexImage::from_vec(h, w, data).map_err(|e| Error::format(e.to_string()))
}
