//! 16→8-bit conversion with percentile truncation, and the optional
//! exposure correction applied to over- or underexposed images.

use super::image::{quantize_u8, Gray16, Gray8};
use crate::error::{Error, Result};

/// Nearest-rank percentile: the value at rank `ceil(p/100 · n)` (1-based)
/// of the sorted pixel multiset, computed from a full histogram.
pub fn percentile_u16(image: &Gray16, p: f64) -> Result<u16> {
    let n = image.pixels().len();
    if n == 0 {
        return Err(Error::invalid("percentile of an empty image"));
    }
    let mut hist = vec![0usize; 65536];
    for &v in image.pixels() {
        hist[v as usize] += 1;
    }
    let rank = nearest_rank(p, n);
    let mut seen = 0;
    for (value, &count) in hist.iter().enumerate() {
        seen += count;
        if seen >= rank {
            return Ok(value as u16);
        }
    }
    unreachable!("rank never exceeds the pixel count")
}

pub(crate) fn nearest_rank(p: f64, n: usize) -> usize {
    ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n)
}

/// Clip to the image's own `[low, high]` percentiles and map affinely onto
/// [0, 255], rounding the exact quotient half-to-even. Degenerate histograms map to 0.
pub fn to_8bit(image: &Gray16, low_pct: f64, high_pct: f64) -> Result<Gray8> {
    if image.is_empty() {
        return Err(Error::invalid("cannot convert an empty image"));
    }
    if !(0.0..=100.0).contains(&low_pct) || !(0.0..=100.0).contains(&high_pct) || low_pct > high_pct {
        return Err(Error::invalid(format!("bad percentile pair ({low_pct}, {high_pct})")));
    }
    let lo = percentile_u16(image, low_pct)?;
    let hi = percentile_u16(image, high_pct)?;
    if hi <= lo {
        return Ok(image.map(|_| 0u8));
    }
    // exact rational rounding of 255·(v − lo)/(hi − lo), ties to even
    let d = (hi - lo) as u32;
    Ok(image.map(|v| {
        let num = 255 * (v.clamp(lo, hi) - lo) as u32;
        let (q, r) = (num / d, num % d);
        let up = 2 * r > d || (2 * r == d && q % 2 == 1);
        (q + up as u32) as u8
    }))
}

/// Mean-intensity band outside which the exposure correction triggers.
pub const EXPOSURE_BAND: (f64, f64) = (100.0, 160.0);

/// Gamma that maps the image mean to mid-grey, clamped to [0.5, 2.0];
/// `None` when the mean lies inside [`EXPOSURE_BAND`].
pub fn exposure_gamma(image: &Gray8) -> Option<f64> {
    let mean = image.mean();
    if (EXPOSURE_BAND.0..=EXPOSURE_BAND.1).contains(&mean) {
        return None;
    }
    let m = (mean / 255.0).clamp(1e-6, 1.0 - 1e-6);
    Some((0.5f64.ln() / m.ln()).clamp(0.5, 2.0))
}

pub fn apply_gamma(image: &Gray8, gamma: f64) -> Gray8 {
    image.map(|v| quantize_u8(255.0 * (v as f64 / 255.0).powf(gamma)))
}

/// Non-linear contrast fix for over/underexposed images.
pub fn correct_exposure(image: &Gray8) -> Gray8 {
    match exposure_gamma(image) {
        Some(g) => apply_gamma(image, g),
        None => image.clone(),
    }
}
