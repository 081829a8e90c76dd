//! Parametric knee-radiograph phantoms with known KL-like structure.
//!
//! Two soft-edged bone bands (femur above, tibia below) are separated by a
//! joint-space gap that narrows with grade. Marginal osteophytes grow out
//! of the four joint corners, and the subchondral bone brightens with
//! grade. Every random quantity is drawn in the same order for every
//! grade, so at a fixed seed the geometry is monotone in grade.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image::{Gray16, Gray8};
use super::manifest::{DatasetRecord, Side, Split};
use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

/// Nominal joint-space width per grade, mm. Grades 1 and 2 narrow only
/// slightly (within the jitter), so osteophytes carry those grades.
pub const NOMINAL_GAP_MM: [f64; NUM_CLASSES] = [7.0, 6.8, 6.5, 4.5, 2.5];
/// Nominal osteophyte reach per grade, mm.
pub const NOMINAL_OSTEOPHYTE_MM: [f64; NUM_CLASSES] = [0.0, 1.5, 3.0, 4.5, 6.0];
/// Peak subchondral brightening per grade, in normalized intensity.
pub const SCLEROSIS: [f64; NUM_CLASSES] = [0.0, 0.0, 0.03, 0.10, 0.20];
pub const GAP_JITTER_MM: f64 = 0.35;
pub const SCALE_JITTER: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size_px: usize,
    pub pixel_spacing_mm: f64,
    pub side: Side,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec { size_px: 350, pixel_spacing_mm: 0.4, side: Side::R }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Gray16,
    /// 255 inside the marginal band where osteophytes can appear, else 0.
    pub osteophyte_mask: Gray8,
    /// Image path, subject and split are left for the caller to fill in.
    pub record: DatasetRecord,
    pub gap_mm: f64,
    pub osteophyte_mm: f64,
    /// Joint-line row in pixels.
    pub joint_row: f64,
    pub half_width_mm: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Params {
    scale: f64,
    shift: (f64, f64),
    gap: f64,
    spur: [f64; 4],
    sclerosis: f64,
    texture: [(f64, f64, f64); 3],
    tissue_tilt: f64,
    gain: f64,
    offset: f64,
}

impl Params {
    fn draw<R: Rng + ?Sized>(grade: usize, rng: &mut R) -> Params {
        let scale = 1.0 + rng.random_range(-SCALE_JITTER..=SCALE_JITTER);
        let shift = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let gap = (NOMINAL_GAP_MM[grade] + rng.random_range(-GAP_JITTER_MM..=GAP_JITTER_MM)) * scale;
        let amp = NOMINAL_OSTEOPHYTE_MM[grade] * rng.random_range(0.85..=1.15) * scale;
        let mut spur = [0.0; 4];
        for s in &mut spur {
            *s = amp * rng.random_range(0.8..=1.2);
        }
        let sclerosis = SCLEROSIS[grade] * rng.random_range(0.9..=1.1);
        let mut texture = [(0.0, 0.0, 0.0); 3];
        for t in &mut texture {
            *t = (rng.random_range(1.5..4.0), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(-1.0..1.0));
        }
        Params {
            scale,
            shift,
            gap,
            spur,
            sclerosis,
            texture,
            tissue_tilt: rng.random_range(-0.04..0.04),
            gain: rng.random_range(28_000.0..42_000.0),
            offset: rng.random_range(1_500.0..6_000.0),
        }
    }
}

/// Renders one phantom. The returned image is in acquisition orientation:
/// left knees are mirrored, so preprocessing (which flips L) restores the
/// canonical layout with the lateral compartment on the left.
pub fn generate_phantom<R: Rng + ?Sized>(grade: u8, rng: &mut R, spec: &PhantomSpec) -> Result<Phantom> {
    let g = grade as usize;
    if g >= NUM_CLASSES {
        return Err(Error::invalid(format!("phantom grade {grade} outside 0..=4")));
    }
    if spec.size_px < 8 || !(spec.pixel_spacing_mm > 0.0) {
        return Err(Error::invalid(format!("bad phantom geometry {spec:?}")));
    }
    let p = Params::draw(g, rng);
    let n = spec.size_px;
    let sp = spec.pixel_spacing_mm;
    let half = n as f64 * sp / 2.0;
    let joint_y = 6.0 * p.scale + p.shift.1;
    let hw = 42.0 * p.scale;
    let hw_tibia = 43.0 * p.scale;
    let edge = 0.5;
    let femur_y = |x: f64| {
        joint_y - p.gap / 2.0 - 2.5 * (-(x / 7.0).powi(2)).exp() - 3.0 * (x.abs() / hw).powi(6)
    };
    let tibia_y = |x: f64| joint_y + p.gap / 2.0 - 2.0 * (-((x.abs() - 3.0) / 2.0).powi(2)).exp();
    // spur reach at height y for the corner whose surface sits at `surface`
    let spur_reach = |a: f64, y: f64, centre: f64| a * (-((y - centre) / (1.5 + 0.25 * a)).powi(2)).exp();
    let noise = Normal::new(0.0, 0.012 * p.gain).unwrap();

    let mut pixels = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    let band_top = joint_y - p.gap / 2.0 - 8.0;
    let band_bottom = joint_y + p.gap / 2.0 + 8.0;
    for py in 0..n {
        let y = (py as f64 + 0.5) * sp - half;
        for px in 0..n {
            let x = (px as f64 + 0.5) * sp - half - p.shift.0;
            let lateral = x < 0.0;
            let (fa, ta) = if lateral { (p.spur[0], p.spur[2]) } else { (p.spur[1], p.spur[3]) };
            let yf = femur_y(x);
            let yt = tibia_y(x);
            let yf_margin = femur_y(hw);
            let yt_margin = tibia_y(hw_tibia);
            let femur_w = hw + spur_reach(fa, y, yf_margin - 1.2);
            let tibia_w = hw_tibia + spur_reach(ta, y, yt_margin + 1.2);
            let femur = sigmoid((yf - y) / edge) * sigmoid((femur_w - x.abs()) / edge);
            let tibia = sigmoid((y - yt) / edge) * sigmoid((tibia_w - x.abs()) / edge);
            let bone = femur.max(tibia);
            let depth = if femur >= tibia { (yf - y).max(0.0) } else { (y - yt).max(0.0) };
            let mut texture = 0.0;
            for &(period, phase, dir) in &p.texture {
                texture += 0.012 * ((x + dir * y) / period * std::f64::consts::TAU + phase).sin();
            }
            let tissue = 0.22 + p.tissue_tilt * y / half;
            let bone_level = 0.42 + texture + p.sclerosis * (-depth / 2.5).exp();
            let v = tissue + bone * bone_level;
            let raw = p.offset + p.gain * v + noise.sample(rng);
            pixels.push(raw.round().clamp(0.0, 65535.0) as u16);
            let in_band = (hw - 3.0..=hw + 8.0).contains(&x.abs()) && (band_top..=band_bottom).contains(&y);
            mask.push(if in_band { 255u8 } else { 0 });
        }
    }
    let mut image = Gray16::new(n, n, pixels)?;
    let mut osteophyte_mask = Gray8::new(n, n, mask)?;
    if spec.side == Side::L {
        image = image.flip_horizontal();
        osteophyte_mask = osteophyte_mask.flip_horizontal();
    }
    Ok(Phantom {
        image,
        osteophyte_mask,
        record: DatasetRecord {
            image_path: String::new(),
            subject_id: String::new(),
            side: spec.side,
            kl_grade: grade,
            pixel_spacing_mm: sp,
            split: Split::Train,
        },
        gap_mm: p.gap,
        osteophyte_mm: p.spur.iter().sum::<f64>() / 4.0,
        joint_row: (joint_y + half) / sp - 0.5,
        half_width_mm: hw,
    })
}

/// Image `index` of `grade` in `split` of the phantom collection seeded by
/// `seed`. Each image has its own stream, its own subject, and sides
/// alternate R/L.
pub fn dataset_phantom(
    seed: u64,
    split: Split,
    grade: u8,
    index: usize,
    size_px: usize,
    pixel_spacing_mm: f64,
) -> Result<Phantom> {
    let split_label = Split::ALL.iter().position(|&s| s == split).unwrap() as u64;
    let side = if index.is_multiple_of(2) { Side::R } else { Side::L };
    let spec = PhantomSpec { size_px, pixel_spacing_mm, side };
    let mut rng = crate::rng::stream(seed, &[split_label, grade as u64, index as u64]);
    let mut ph = generate_phantom(grade, &mut rng, &spec)?;
    let stem = format!("{split}_kl{grade}_{index:04}");
    ph.record.image_path = format!("images/{stem}.pgm");
    ph.record.subject_id = format!("subject_{stem}");
    ph.record.split = split;
    Ok(ph)
}

/// `(split, grade, index)` of every image in a collection with `counts[split]`
/// images per grade, in generation order.
pub fn dataset_layout(counts: &[(Split, usize)]) -> Vec<(Split, u8, usize)> {
    let mut out = Vec::new();
    for &(split, count) in counts {
        for grade in 0..NUM_CLASSES as u8 {
            out.extend((0..count).map(|i| (split, grade, i)));
        }
    }
    out
}

pub fn generate_dataset(counts: &[(Split, usize)], seed: u64, size_px: usize, pixel_spacing_mm: f64) -> Result<Vec<Phantom>> {
    dataset_layout(counts)
        .into_iter()
        .map(|(split, grade, i)| dataset_phantom(seed, split, grade, i, size_px, pixel_spacing_mm))
        .collect()
}
