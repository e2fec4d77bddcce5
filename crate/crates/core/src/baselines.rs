//! Fixed comparison masks: equispaced lines and constant-radius Poisson discs.

use crate::error::{Error, Result};
use crate::forward::{acceleration, acs_range, BinaryMask, PatternKind};
use crate::tensor::Rng;

fn check_target(target_r: f64) -> Result<()> {
    if !(target_r >= 1.0) || !target_r.is_finite() {
        return Err(Error::Infeasible(format!("target acceleration must be >= 1, got {target_r}")));
    }
    Ok(())
}

/// Every `k`-th column plus the ACS band, with the offset chosen so the
/// center column is on the lattice and `k` chosen so the achieved
/// acceleration is closest to `target_r` (ties go to the denser mask).
pub fn equispaced_mask(height: usize, width: usize, target_r: f64, acs_width: usize) -> Result<BinaryMask> {
    check_target(target_r)?;
    if height == 0 || width == 0 {
        return Err(Error::EmptyGrid);
    }
    let mut best: Option<(f64, BinaryMask)> = None;
    for k in 1..=width {
        let offset = (width / 2) % k;
        let keep: Vec<bool> = (0..width).map(|c| c % k == offset).collect();
        let mask = BinaryMask::new(PatternKind::Line, height, width, keep, acs_width)?;
        let gap = (acceleration(&mask)? - target_r).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, mask));
        }
    }
    Ok(best.expect("width >= 1").1)
}

fn acs_block(height: usize, width: usize, acs_width: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    (acs_range(height, acs_width), acs_range(width, acs_width))
}

/// Bridson dart throwing on the integer lattice: points outside the ACS block
/// are accepted when at least `radius` from every accepted point.
fn bridson(height: usize, width: usize, acs_width: usize, radius: f64, rng: &mut Rng) -> Vec<(usize, usize)> {
    const CANDIDATES: usize = 30;
    let (rows, cols) = acs_block(height, width, acs_width);
    let in_acs = |r: usize, c: usize| rows.contains(&r) && cols.contains(&c);
    let free: Vec<(usize, usize)> =
        (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).filter(|&(r, c)| !in_acs(r, c)).collect();
    if free.is_empty() {
        return Vec::new();
    }
    let r2 = radius * radius;
    let far_enough = |pts: &[(usize, usize)], (r, c): (usize, usize)| {
        pts.iter().all(|&(pr, pc)| {
            let dr = pr as f64 - r as f64;
            let dc = pc as f64 - c as f64;
            dr * dr + dc * dc >= r2
        })
    };
    let mut points = vec![free[rng.below(free.len())]];
    let mut active = vec![0usize];
    while !active.is_empty() {
        let slot = rng.below(active.len());
        let (br, bc) = points[active[slot]];
        let mut placed = false;
        for _ in 0..CANDIDATES {
            let dist = rng.range(radius, 2.0 * radius);
            let angle = rng.range(0.0, std::f64::consts::TAU);
            let r = (br as f64 + dist * angle.sin()).round();
            let c = (bc as f64 + dist * angle.cos()).round();
            if r < 0.0 || c < 0.0 || r >= height as f64 || c >= width as f64 {
                continue;
            }
            let cand = (r as usize, c as usize);
            if in_acs(cand.0, cand.1) || !far_enough(&points, cand) {
                continue;
            }
            points.push(cand);
            active.push(points.len() - 1);
            placed = true;
            break;
        }
        if !placed {
            active.swap_remove(slot);
        }
    }
    points
}

/// A Poisson-disc POINT mask and the disc radius that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonDisc {
    pub mask: BinaryMask,
    pub radius: f64,
}

pub const POISSON_TOLERANCE: f64 = 0.05;
const BISECTION_LIMIT: usize = 50;

/// Constant-radius Poisson-disc mask with the ACS block forced. The radius is
/// bisected until the achieved acceleration is within 5% of `target_r`; each
/// probe uses its own stream derived from `rng`. No two kept points outside
/// the ACS block are closer than the returned radius.
pub fn poisson_disc_mask(
    height: usize,
    width: usize,
    target_r: f64,
    acs_width: usize,
    rng: &mut Rng,
) -> Result<PoissonDisc> {
    check_target(target_r)?;
    if height == 0 || width == 0 {
        return Err(Error::EmptyGrid);
    }
    let total = (height * width) as f64;
    if target_r * (1.0 - POISSON_TOLERANCE) <= 1.0 {
        return Ok(PoissonDisc { mask: BinaryMask::full(PatternKind::Point, height, width, acs_width)?, radius: 1.0 });
    }
    let (rows, cols) = acs_block(height, width, acs_width);
    let acs_count = rows.len() * cols.len();
    if acs_count as f64 > total / (target_r * (1.0 - POISSON_TOLERANCE)) {
        return Err(Error::Infeasible(format!(
            "the {acs_width}-wide calibration block alone exceeds the sampling budget for R = {target_r}"
        )));
    }
    let base = rng.next_u64();
    let build = |radius: f64, probe: usize| -> Result<BinaryMask> {
        let mut stream = Rng::new(base).derive(probe as u64);
        let mut keep = vec![false; height * width];
        for (r, c) in bridson(height, width, acs_width, radius, &mut stream) {
            keep[r * width + c] = true;
        }
        BinaryMask::new(PatternKind::Point, height, width, keep, acs_width)
    };
    let (mut lo, mut hi) = (1.0f64, height.max(width) as f64);
    let mut sparse: Option<BinaryMask> = None;
    for probe in 0..BISECTION_LIMIT {
        let radius = 0.5 * (lo + hi);
        let mask = build(radius, probe)?;
        let achieved = acceleration(&mask)?;
        if (achieved - target_r).abs() <= POISSON_TOLERANCE * target_r {
            return Ok(PoissonDisc { mask, radius });
        }
        if achieved < target_r {
            lo = radius;
        } else {
            hi = radius;
            sparse = Some(mask);
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    // Lattice distances are discrete, so the kept count can jump over the
    // target window at a single radius. Top up the sparser mask with darts
    // that respect the smaller radius.
    let Some(mask) = sparse else {
        return Err(Error::Infeasible(format!("radius bisection did not reach R = {target_r}")));
    };
    let mut keep = mask.sites().to_vec();
    let budget = (total / target_r).round() as usize;
    let mut kept = keep.iter().filter(|k| **k).count();
    let mut order: Vec<usize> = (0..keep.len()).filter(|&i| !keep[i] && !in_block(&rows, &cols, width, i)).collect();
    Rng::new(base).derive(u64::MAX).shuffle(&mut order);
    let lo2 = lo * lo;
    for i in order {
        if kept >= budget {
            break;
        }
        let (r, c) = (i / width, i % width);
        let clear = (0..keep.len()).filter(|&j| keep[j] && !in_block(&rows, &cols, width, j)).all(|j| {
            let dr = (j / width) as f64 - r as f64;
            let dc = (j % width) as f64 - c as f64;
            dr * dr + dc * dc >= lo2
        });
        if clear {
            keep[i] = true;
            kept += 1;
        }
    }
    let mask = BinaryMask::new(PatternKind::Point, height, width, keep, acs_width)?;
    let achieved = acceleration(&mask)?;
    if (achieved - target_r).abs() <= POISSON_TOLERANCE * target_r {
        return Ok(PoissonDisc { mask, radius: lo });
    }
    Err(Error::Infeasible(format!("Poisson-disc search ended at R = {achieved:.3}, target {target_r}")))
}

fn in_block(rows: &std::ops::Range<usize>, cols: &std::ops::Range<usize>, width: usize, i: usize) -> bool {
    rows.contains(&(i / width)) && cols.contains(&(i % width))
}

/// Smallest distance between two kept points outside the ACS block.
pub fn min_non_acs_distance(mask: &BinaryMask) -> Option<f64> {
    let (h, w) = mask.shape();
    let (rows, cols) = acs_block(h, w, mask.acs_width());
    let pts: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.keeps(r, c) && !(rows.contains(&r) && cols.contains(&c)))
        .collect();
    let mut best: Option<f64> = None;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let dr = pts[i].0 as f64 - pts[j].0 as f64;
            let dc = pts[i].1 as f64 - pts[j].1 as f64;
            let d = (dr * dr + dc * dc).sqrt();
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
    }
    best
}
