//! Millimetre-based ROI cropping, the 300-px preprocessing chain and
//! lateral/medial patch extraction.

use super::image::{resize_bilinear, Gray16, Gray8, GrayImage};
use super::intensity::{correct_exposure, to_8bit};
use super::manifest::Side;
use crate::error::{Error, Result};
use crate::model::{KneePatchPair, Provenance};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub roi_mm: f64,
    pub crop_mm: f64,
    pub resize_px: usize,
    pub patch_side: usize,
    pub offset_k: usize,
    pub trunc_low: f64,
    pub trunc_high: f64,
    /// Gamma-correct images whose mean falls outside the exposure band.
    pub exposure_fix: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            roi_mm: 140.0,
            crop_mm: 130.0,
            resize_px: 300,
            patch_side: 128,
            offset_k: 100,
            trunc_low: 5.0,
            trunc_high: 99.0,
            exposure_fix: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.roi_mm > 0.0) {
            problems.push(format!("roi_mm must be positive, got {}", self.roi_mm));
        }
        if !(self.crop_mm > 0.0 && self.crop_mm <= self.roi_mm) {
            problems.push(format!("crop_mm {} must lie in (0, roi_mm={}]", self.crop_mm, self.roi_mm));
        }
        if self.patch_side == 0 || self.patch_side > self.resize_px {
            problems.push(format!("patch side {} must lie in [1, {}]", self.patch_side, self.resize_px));
        }
        if self.offset_k + self.patch_side > self.resize_px {
            problems.push(format!(
                "offset K={} plus patch side S={} exceeds {} px",
                self.offset_k, self.patch_side, self.resize_px
            ));
        }
        if !(0.0..=100.0).contains(&self.trunc_low) || !(0.0..=100.0).contains(&self.trunc_high)
            || self.trunc_low > self.trunc_high
        {
            problems.push(format!("bad truncation percentiles ({}, {})", self.trunc_low, self.trunc_high));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry::new(self.resize_px, self.patch_side, self.offset_k)
    }
}

/// Square window side in pixels for a physical extent.
pub fn window_px(side_mm: f64, pixel_spacing_mm: f64) -> usize {
    (side_mm / pixel_spacing_mm).round_ties_even() as usize
}

/// Square crop of `side_mm` centred on `center` (pixel coordinates).
pub fn crop_mm<P: Copy + Default>(
    image: &GrayImage<P>,
    pixel_spacing_mm: f64,
    center: (f64, f64),
    side_mm: f64,
) -> Result<GrayImage<P>> {
    if !(pixel_spacing_mm > 0.0) || !(side_mm > 0.0) {
        return Err(Error::invalid(format!("spacing {pixel_spacing_mm} and side {side_mm} must be positive")));
    }
    let w = window_px(side_mm, pixel_spacing_mm);
    let x0 = (center.0 - w as f64 / 2.0).floor() as i64;
    let y0 = (center.1 - w as f64 / 2.0).floor() as i64;
    let (iw, ih) = (image.width() as i64, image.height() as i64);
    let w = w as i64;
    let deficit = [(-x0).max(0), (-y0).max(0), (x0 + w - iw).max(0), (y0 + w - ih).max(0)];
    if w == 0 || deficit.iter().any(|&d| d > 0) {
        return Err(Error::OutOfBounds(format!(
            "{side_mm} mm window ({w} px) at ({:.1}, {:.1}) exceeds {iw}×{ih} image by \
             left {} top {} right {} bottom {} px",
            center.0, center.1, deficit[0], deficit[1], deficit[2], deficit[3]
        )));
    }
    image.crop(x0 as usize, y0 as usize, w as usize, w as usize)
}

/// Full chain from a raw 16-bit radiograph to the `resize_px` square:
/// 8-bit conversion, side flip, ROI at the image centre, concentric
/// centre crop, bilinear resize.
pub fn preprocess_image(raw: &Gray16, pixel_spacing_mm: f64, side: Side, cfg: &PreprocessConfig) -> Result<Gray8> {
    let mut img = to_8bit(raw, cfg.trunc_low, cfg.trunc_high)?;
    if side == Side::L {
        img = img.flip_horizontal();
    }
    let center = (img.width() as f64 / 2.0, img.height() as f64 / 2.0);
    let roi = crop_mm(&img, pixel_spacing_mm, center, cfg.roi_mm)?;
    let c = roi.width() as f64 / 2.0;
    let crop = crop_mm(&roi, pixel_spacing_mm, (c, c), cfg.crop_mm)?;
    let mut out = resize_bilinear(&crop, cfg.resize_px, cfg.resize_px);
    if cfg.exposure_fix {
        out = correct_exposure(&out);
    }
    Ok(out)
}

/// Carries a binary mask drawn on the raw image through the geometric part
/// of [`preprocess_image`]. Resampled values of at least 128 stay set.
pub fn preprocess_mask(mask: &Gray8, pixel_spacing_mm: f64, side: Side, cfg: &PreprocessConfig) -> Result<Gray8> {
    let mut img = mask.clone();
    if side == Side::L {
        img = img.flip_horizontal();
    }
    let center = (img.width() as f64 / 2.0, img.height() as f64 / 2.0);
    let roi = crop_mm(&img, pixel_spacing_mm, center, cfg.roi_mm)?;
    let c = roi.width() as f64 / 2.0;
    let crop = crop_mm(&roi, pixel_spacing_mm, (c, c), cfg.crop_mm)?;
    Ok(resize_bilinear(&crop, cfg.resize_px, cfg.resize_px).map(|v| if v >= 128 { 255 } else { 0 }))
}

/// Placement of the two patches on the preprocessed square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub canvas: usize,
    pub side: usize,
    pub offset_k: usize,
}

pub type Rect = (usize, usize, usize, usize);

impl PatchGeometry {
    pub fn new(canvas: usize, side: usize, offset_k: usize) -> Self {
        PatchGeometry { canvas, side, offset_k }
    }

    pub fn lateral_rect(&self) -> Rect {
        (0, self.offset_k, self.side, self.side)
    }

    pub fn medial_rect(&self) -> Rect {
        (self.canvas - self.side, self.offset_k, self.side, self.side)
    }
}

fn patch_tensor(img: &Gray8) -> Result<Tensor<f32>> {
    let data = img.pixels().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(&[1, img.height(), img.width()], data)
}

/// Lateral crop at `(0, K)`, medial crop at `(W − S, K)` stored column-reversed.
pub fn extract_patch_pair(image: &Gray8, side: usize, offset_k: usize) -> Result<KneePatchPair<f32>> {
    if side == 0 || side > image.width() || offset_k + side > image.height() {
        return Err(Error::OutOfBounds(format!(
            "patches S={side}, K={offset_k} do not fit a {}×{} image",
            image.width(),
            image.height()
        )));
    }
    let geom = PatchGeometry::new(image.width(), side, offset_k);
    let (lx, ly, _, _) = geom.lateral_rect();
    let (mx, my, _, _) = geom.medial_rect();
    let lateral = image.crop(lx, ly, side, side)?;
    let medial = image.crop(mx, my, side, side)?.flip_horizontal();
    Ok(KneePatchPair {
        lateral: patch_tensor(&lateral)?,
        medial_flipped: patch_tensor(&medial)?,
        provenance: Provenance {
            image_id: String::new(),
            lateral_rect: geom.lateral_rect(),
            medial_rect: geom.medial_rect(),
        },
    })
}
