//! Multi-coil Cartesian measurement operator `y_i = P F S_i x + eps`.
//!
//! Unsampled k-space entries are stored as explicit zeros, so `A^H A` is a
//! diagonal masking in k-space and every grid keeps the image shape.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fft2_centered, gaussian_complex, ifft2_centered, Complex64, ComplexImage, KSpaceGrid, Rng};

/// Whole readout lines (one site per column) or individual k-space points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Line,
    Point,
}

impl PatternKind {
    pub fn sites(self, height: usize, width: usize) -> usize {
        match self {
            PatternKind::Line => width,
            PatternKind::Point => height * width,
        }
    }

    /// Mask site that controls k-space entry `(row, col)`.
    #[inline]
    pub fn site_of(self, width: usize, row: usize, col: usize) -> usize {
        match self {
            PatternKind::Line => col,
            PatternKind::Point => row * width + col,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::Line => "LINE",
            PatternKind::Point => "POINT",
        }
    }
}

impl std::str::FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "line" => Ok(PatternKind::Line),
            "point" => Ok(PatternKind::Point),
            other => Err(Error::invalid(format!("unknown pattern kind `{other}`"))),
        }
    }
}

/// Centered index range of width `acs` inside `0..n`.
pub fn acs_range(n: usize, acs: usize) -> Range<usize> {
    let acs = acs.min(n);
    let start = n / 2 - acs / 2;
    start..start + acs
}

/// Whether `site` lies in the always-sampled calibration region.
pub fn is_acs_site(kind: PatternKind, height: usize, width: usize, acs: usize, site: usize) -> bool {
    if acs == 0 {
        return false;
    }
    match kind {
        PatternKind::Line => acs_range(width, acs).contains(&site),
        PatternKind::Point => {
            let (r, c) = (site / width, site % width);
            acs_range(height, acs).contains(&r) && acs_range(width, acs).contains(&c)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    kind: PatternKind,
    height: usize,
    width: usize,
    keep: Vec<bool>,
    acs_width: usize,
}

impl BinaryMask {
    /// Builds a mask from per-site flags; calibration sites are forced on.
    pub fn new(kind: PatternKind, height: usize, width: usize, mut keep: Vec<bool>, acs_width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyGrid);
        }
        let n = kind.sites(height, width);
        if keep.len() != n {
            return Err(Error::invalid(format!("{} mask needs {n} sites, got {}", kind.as_str(), keep.len())));
        }
        for (site, k) in keep.iter_mut().enumerate() {
            if is_acs_site(kind, height, width, acs_width, site) {
                *k = true;
            }
        }
        Ok(Self { kind, height, width, keep, acs_width })
    }

    pub fn full(kind: PatternKind, height: usize, width: usize, acs_width: usize) -> Result<Self> {
        Self::new(kind, height, width, vec![true; kind.sites(height, width)], acs_width)
    }

    /// No sampled sites at all; used for unconditional sampling.
    pub fn empty(kind: PatternKind, height: usize, width: usize) -> Result<Self> {
        Self::new(kind, height, width, vec![false; kind.sites(height, width)], 0)
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn acs_width(&self) -> usize {
        self.acs_width
    }

    pub fn sites(&self) -> &[bool] {
        &self.keep
    }

    pub fn total_sites(&self) -> usize {
        self.keep.len()
    }

    pub fn kept_sites(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn sampling_fraction(&self) -> f64 {
        self.kept_sites() as f64 / self.total_sites() as f64
    }

    #[inline]
    pub fn keeps(&self, row: usize, col: usize) -> bool {
        self.keep[self.kind.site_of(self.width, row, col)]
    }

    /// Per-k-space-entry 0/1 weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(if self.keeps(r, c) { 1.0 } else { 0.0 });
            }
        }
        out
    }

    pub fn apply(&self, grid: &mut KSpaceGrid) {
        let w = self.width;
        for (i, v) in grid.data_mut().iter_mut().enumerate() {
            if !self.keeps(i / w, i % w) {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// `MASK <LINE|POINT> <h> <w> <acs_width>` followed by `h` rows of `w`
    /// `0`/`1` characters, each row newline-terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height + 32);
        let _ = writeln!(s, "MASK {} {} {} {}", self.kind.as_str(), self.height, self.width, self.acs_width);
        for r in 0..self.height {
            for c in 0..self.width {
                s.push(if self.keeps(r, c) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().ok_or_else(|| Error::format("empty mask file"))?;
        let header = header.strip_suffix('\n').ok_or_else(|| Error::format("unterminated mask header"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 5 || fields[0] != "MASK" {
            return Err(Error::format(format!("bad mask header `{header}`")));
        }
        let kind = match fields[1] {
            "LINE" => PatternKind::Line,
            "POINT" => PatternKind::Point,
            other => return Err(Error::format(format!("bad pattern kind `{other}`"))),
        };
        let parse = |s: &str| -> Result<usize> {
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
                return Err(Error::format(format!("bad integer `{s}`")));
            }
            s.parse().map_err(|_| Error::format(format!("bad integer `{s}`")))
        };
        let (height, width, acs) = (parse(fields[2])?, parse(fields[3])?, parse(fields[4])?);
        if height == 0 || width == 0 {
            return Err(Error::format("mask dimensions must be positive"));
        }
        let mut grid = Vec::with_capacity(height * width);
        for r in 0..height {
            let line = lines.next().ok_or_else(|| Error::format(format!("missing mask row {r}")))?;
            let row = line.strip_suffix('\n').ok_or_else(|| Error::format(format!("unterminated mask row {r}")))?;
            if row.len() != width {
                return Err(Error::format(format!("row {r} has {} entries, expected {width}", row.len())));
            }
            for ch in row.bytes() {
                match ch {
                    b'0' => grid.push(false),
                    b'1' => grid.push(true),
                    _ => return Err(Error::format(format!("invalid character in row {r}"))),
                }
            }
        }
        if lines.next().is_some() {
            return Err(Error::format("trailing data after mask rows"));
        }
        let keep = match kind {
            PatternKind::Point => grid,
            PatternKind::Line => {
                let first = grid[..width].to_vec();
                if grid.chunks(width).any(|row| row != first.as_slice()) {
                    return Err(Error::format("LINE mask rows differ"));
                }
                first
            }
        };
        for (site, &k) in keep.iter().enumerate() {
            if !k && is_acs_site(kind, height, width, acs, site) {
                return Err(Error::format(format!("calibration site {site} is not sampled")));
            }
        }
        Ok(Self { kind, height, width, keep, acs_width: acs })
    }
}

/// Acceleration `R = total sites / kept sites`.
pub fn acceleration(mask: &BinaryMask) -> Result<f64> {
    let kept = mask.kept_sites();
    if kept == 0 {
        return Err(Error::invalid("acceleration of a mask with no kept sites"));
    }
    Ok(mask.total_sites() as f64 / kept as f64)
}

/// Coil sensitivity maps normalized so that `sum_i |S_i(p)|^2 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSet {
    maps: Vec<ComplexImage>,
}

/// Bump standard deviation as a fraction of the larger image side.
pub const COIL_WIDTH_FRACTION: f64 = 0.6;

impl CoilSet {
    pub fn from_maps(maps: Vec<ComplexImage>) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::invalid("coil set needs at least one map"))?;
        let shape = first.shape();
        for m in &maps {
            m.check_shape(shape)?;
        }
        Ok(Self { maps })
    }

    /// One coil with unit sensitivity.
    pub fn single(height: usize, width: usize) -> Self {
        Self { maps: vec![ComplexImage::from_fn(height, width, |_, _| Complex64::new(1.0, 0.0))] }
    }

    pub fn maps(&self) -> &[ComplexImage] {
        &self.maps
    }

    pub fn count(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.maps[0].shape()
    }

    /// Bump centers for `c` coils, in pixel coordinates `(row, col)`.
    pub fn bump_centers(height: usize, width: usize, c: usize, phase0: f64) -> Vec<(f64, f64)> {
        let (cy, cx) = ((height / 2) as f64, (width / 2) as f64);
        let (ry, rx) = (height as f64 / 2.0, width as f64 / 2.0);
        (0..c)
            .map(|i| {
                let a = phase0 + std::f64::consts::TAU * i as f64 / c as f64;
                (cy + ry * a.sin(), cx + rx * a.cos())
            })
            .collect()
    }
}

/// Synthetic smooth coil maps: Gaussian bumps centered on the image border,
/// each with a constant phase, jointly normalized.
pub fn make_coils(height: usize, width: usize, c: usize, rng: &mut Rng) -> Result<CoilSet> {
    if c == 0 {
        return Err(Error::invalid("coil count must be at least 1"));
    }
    if height == 0 || width == 0 {
        return Err(Error::EmptyGrid);
    }
    let rotation = rng.range(0.0, std::f64::consts::TAU);
    let centers = CoilSet::bump_centers(height, width, c, rotation);
    let phases: Vec<f64> = (0..c).map(|i| if i == 0 { 0.0 } else { rng.range(0.0, std::f64::consts::TAU) }).collect();
    let spread = COIL_WIDTH_FRACTION * height.max(width) as f64;
    let mut maps: Vec<ComplexImage> = centers
        .iter()
        .zip(&phases)
        .map(|(&(py, px), &phase)| {
            let rot = Complex64::from_polar(1.0, phase);
            ComplexImage::from_fn(height, width, |r, col| {
                let d2 = (r as f64 - py).powi(2) + (col as f64 - px).powi(2);
                rot * (-d2 / (2.0 * spread * spread)).exp()
            })
        })
        .collect();
    for p in 0..height * width {
        let total: f64 = maps.iter().map(|m| m.data()[p].norm_sqr()).sum::<f64>().sqrt();
        for m in &mut maps {
            m.data_mut()[p] /= total;
        }
    }
    CoilSet::from_maps(maps)
}

/// Per-coil k-space measurements with zeros off the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurements {
    pub coils: Vec<KSpaceGrid>,
    pub mask: BinaryMask,
    pub noise_std: f64,
}

impl Measurements {
    pub fn norm(&self) -> f64 {
        self.coils.iter().map(KSpaceGrid::norm_sqr).sum::<f64>().sqrt()
    }

    pub fn zeros_like(coils: usize, mask: &BinaryMask) -> Self {
        Self { coils: vec![KSpaceGrid::zeros(mask.height(), mask.width()); coils], mask: mask.clone(), noise_std: 0.0 }
    }
}

fn check_operator(x_shape: (usize, usize), coils: &CoilSet, mask: &BinaryMask) -> Result<()> {
    if coils.shape() != x_shape {
        return Err(Error::ShapeMismatch { expected: x_shape, got: coils.shape() });
    }
    if mask.shape() != x_shape {
        return Err(Error::ShapeMismatch { expected: x_shape, got: mask.shape() });
    }
    Ok(())
}

/// Noise-free `A x`, one grid per coil.
pub fn apply_operator(x: &ComplexImage, coils: &CoilSet, mask: &BinaryMask) -> Result<Vec<KSpaceGrid>> {
    check_operator(x.shape(), coils, mask)?;
    coils
        .maps()
        .iter()
        .map(|s| {
            let mut k = fft2_centered(&x.zip_map(s, |a, b| a * b))?;
            mask.apply(&mut k);
            Ok(k)
        })
        .collect()
}

/// `A^H` applied to per-coil grids (entries off the mask are ignored).
pub fn apply_adjoint(grids: &[KSpaceGrid], coils: &CoilSet, mask: &BinaryMask) -> Result<ComplexImage> {
    if grids.len() != coils.count() {
        return Err(Error::invalid(format!("{} measurement grids for {} coils", grids.len(), coils.count())));
    }
    let shape = coils.shape();
    check_operator(shape, coils, mask)?;
    let mut out = ComplexImage::zeros(shape.0, shape.1);
    for (g, s) in grids.iter().zip(coils.maps()) {
        g.check_shape(shape)?;
        let mut masked = g.clone();
        mask.apply(&mut masked);
        let img = ifft2_centered(&masked)?;
        for ((o, v), sv) in out.data_mut().iter_mut().zip(img.data()).zip(s.data()) {
            *o += sv.conj() * v;
        }
    }
    Ok(out)
}

/// `y_i = mask * (F(S_i x) + eps_i)` with complex noise of per-entry variance `noise_std^2`.
pub fn forward(
    x: &ComplexImage,
    coils: &CoilSet,
    mask: &BinaryMask,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<Measurements> {
    let mut grids = apply_operator(x, coils, mask)?;
    if noise_std > 0.0 {
        let (h, w) = x.shape();
        for g in &mut grids {
            let eps = gaussian_complex(rng, h, w, noise_std)?;
            let mut eps = KSpaceGrid::from_vec(h, w, eps.into_vec())?;
            mask.apply(&mut eps);
            *g += &eps;
        }
    } else if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::invalid(format!("noise std must be finite and >= 0, got {noise_std}")));
    }
    Ok(Measurements { coils: grids, mask: mask.clone(), noise_std })
}

pub fn adjoint(y: &Measurements, coils: &CoilSet) -> Result<ComplexImage> {
    apply_adjoint(&y.coils, coils, &y.mask)
}

/// Per-coil residual `A x - y`.
pub fn residual(x: &ComplexImage, y: &Measurements, coils: &CoilSet) -> Result<Vec<KSpaceGrid>> {
    let mut ax = apply_operator(x, coils, &y.mask)?;
    if ax.len() != y.coils.len() {
        return Err(Error::invalid(format!("{} measurement grids for {} coils", y.coils.len(), ax.len())));
    }
    for (a, b) in ax.iter_mut().zip(&y.coils) {
        b.check_shape(a.shape())?;
        *a -= b;
    }
    Ok(ax)
}

/// `grad_x ||A x - y||^2 = 2 A^H (A x - y)`.
pub fn data_fidelity_grad(x: &ComplexImage, y: &Measurements, coils: &CoilSet) -> Result<ComplexImage> {
    let r = residual(x, y, coils)?;
    Ok(apply_adjoint(&r, coils, &y.mask)?.scaled(2.0))
}

pub fn data_fidelity(x: &ComplexImage, y: &Measurements, coils: &CoilSet) -> Result<f64> {
    Ok(residual(x, y, coils)?.iter().map(KSpaceGrid::norm_sqr).sum())
}
