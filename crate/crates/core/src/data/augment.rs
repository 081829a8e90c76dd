//! On-the-fly augmentation of the preprocessed square, applied in a
//! random order on an f64 buffer and quantized once at the end.

use rand::seq::SliceRandom;
use rand::Rng;

use super::image::{sample_bilinear, Gray8};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Rotation angle drawn from ±this many degrees.
    pub rotation_deg: f64,
    /// Additive intensity offset drawn from ±this many gray levels.
    pub brightness: f64,
    /// Contrast factor drawn from 1 ± this.
    pub contrast: f64,
    /// Gamma drawn from 1 ± this.
    pub gamma: f64,
    /// Integer translation drawn from ±this many pixels per axis.
    pub jitter_px: usize,
    /// Each op is applied independently with this probability.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotation_deg: 5.0, brightness: 10.0, contrast: 0.1, gamma: 0.1, jitter_px: 5, probability: 0.5 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig { rotation_deg: 0.0, brightness: 0.0, contrast: 0.0, gamma: 0.0, jitter_px: 0, probability: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [("rotation_deg", self.rotation_deg), ("brightness", self.brightness), ("contrast", self.contrast)] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("augment {name} must be a non-negative range, got {v}"));
            }
        }
        if !(self.contrast < 1.0) {
            problems.push(format!("augment contrast range {} must be below 1", self.contrast));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            problems.push(format!("augment gamma range {} must lie in [0, 1) to keep gamma positive", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            problems.push(format!("augment probability {} outside [0, 1]", self.probability));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    Rotate { degrees: f64 },
    Brightness { offset: f64 },
    Contrast { factor: f64 },
    Gamma { gamma: f64 },
    Jitter { dx: i64, dy: i64 },
}

/// Draws the op sequence: a random order over all five kinds, each kept
/// with the configured probability. Parameters are drawn regardless.
pub fn draw_ops<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Vec<AugmentOp> {
    let mut kinds = [0u8, 1, 2, 3, 4];
    kinds.shuffle(rng);
    let sym = |r: f64, rng: &mut R| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let mut ops = Vec::new();
    for k in kinds {
        let keep = rng.random::<f64>() < cfg.probability;
        let op = match k {
            0 => AugmentOp::Rotate { degrees: sym(cfg.rotation_deg, rng) },
            1 => AugmentOp::Brightness { offset: sym(cfg.brightness, rng) },
            2 => AugmentOp::Contrast { factor: 1.0 + sym(cfg.contrast, rng) },
            3 => AugmentOp::Gamma { gamma: 1.0 + sym(cfg.gamma, rng) },
            _ => {
                let j = cfg.jitter_px as i64;
                AugmentOp::Jitter { dx: rng.random_range(-j..=j), dy: rng.random_range(-j..=j) }
            }
        };
        if keep {
            ops.push(op);
        }
    }
    ops
}

/// Rotation about the image centre, bilinear with border replication.
pub fn rotate(values: &[f64], width: usize, height: usize, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(values.len());
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse map: output pixel samples the source rotated by −θ
            let sx = cx + c * dx + s * dy;
            let sy = cy - s * dx + c * dy;
            out.push(sample_bilinear(values, width, height, sx, sy));
        }
    }
    out
}

fn translate(values: &[f64], width: usize, height: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for y in 0..height as i64 {
        let sy = (y + dy).clamp(0, height as i64 - 1) as usize;
        for x in 0..width as i64 {
            let sx = (x + dx).clamp(0, width as i64 - 1) as usize;
            out.push(values[sy * width + sx]);
        }
    }
    out
}

pub fn apply_ops(image: &Gray8, ops: &[AugmentOp]) -> Gray8 {
    let (w, h) = (image.width(), image.height());
    let mut v = image.to_f64();
    for op in ops {
        match *op {
            AugmentOp::Rotate { degrees } if degrees != 0.0 => v = rotate(&v, w, h, degrees),
            AugmentOp::Brightness { offset } => v.iter_mut().for_each(|p| *p = (*p + offset).clamp(0.0, 255.0)),
            AugmentOp::Contrast { factor } => {
                v.iter_mut().for_each(|p| *p = ((*p - 127.5) * factor + 127.5).clamp(0.0, 255.0))
            }
            AugmentOp::Gamma { gamma } if gamma != 1.0 => {
                v.iter_mut().for_each(|p| *p = 255.0 * (p.clamp(0.0, 255.0) / 255.0).powf(gamma))
            }
            AugmentOp::Jitter { dx, dy } if dx != 0 || dy != 0 => v = translate(&v, w, h, dx, dy),
            _ => {}
        }
    }
    Gray8::from_f64(w, h, &v)
}

pub fn augment<R: Rng + ?Sized>(image: &Gray8, cfg: &AugmentConfig, rng: &mut R) -> Gray8 {
    apply_ops(image, &draw_ops(cfg, rng))
}
