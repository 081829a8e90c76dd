//! Class-discriminating attention for the two-branch network and its
//! ensembles: per-branch GradCAM on the final Conv-BN-ReLU block, summed
//! over members, flipped back and projected onto the preprocessed image.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::geometry::PatchGeometry;
use crate::data::image::{resize_bilinear_f64, write_pgm8, write_ppm, Gray8, GrayImage};
use crate::error::{Error, Result};
use crate::model::{KneePatchPair, PairBatch, SiameseModel, LATERAL, MEDIAL};
use crate::tensor::{Real, Tensor};
use crate::train::{EnsembleBundle, ProbabilityVector};

/// One branch's GradCAM ingredients for a single input.
#[derive(Debug, Clone)]
pub struct BranchAttention {
    /// Final activation maps, F×X×Y.
    pub activations: Tensor<f64>,
    /// Class weights read at the branch's post-GAP node, length F.
    pub weights: Vec<f64>,
    /// `ReLU(Σ_k w_k · A_k)`, X×Y.
    pub map: Tensor<f64>,
}

/// `ReLU(Σ_k w_k · A_k)` over an F×X×Y stack.
pub fn weighted_relu_map(activations: &Tensor<f64>, weights: &[f64]) -> Result<Tensor<f64>> {
    let [f, x, y]: [usize; 3] = activations
        .shape()
        .try_into()
        .map_err(|_| Error::shape(format!("activation stack must be F×X×Y, got {:?}", activations.shape())))?;
    if weights.len() != f {
        return Err(Error::shape(format!("{} weights for {f} activation maps", weights.len())));
    }
    let mut out = vec![0.0; x * y];
    for (k, &w) in weights.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(&activations.data()[k * x * y..(k + 1) * x * y]) {
            *o += w * a;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    Tensor::new(&[x, y], out)
}

/// GradCAM for both branches of `model` (evaluated in eval mode) with respect
/// to the logit of `class`.
pub fn branch_attention<T: Real>(
    model: &SiameseModel<T>,
    pair: &KneePatchPair<T>,
    class: usize,
) -> Result<[BranchAttention; 2]> {
    let k = model.config.num_classes;
    if class >= k {
        return Err(Error::invalid(format!("class {class} outside 0..{k}")));
    }
    let batch = PairBatch::from_pairs(&[pair])?;
    let (_, cache) = model.forward_eval(&batch)?;
    let mut onehot = Tensor::<T>::zeros(&[1, k]);
    onehot.data_mut()[class] = T::one();
    let grads = model.feature_gradients(&cache, &onehot)?;
    let build = |branch: usize| -> Result<BranchAttention> {
        let act = cache.branch_activation(branch);
        let shape = &act.shape()[1..];
        let activations = Tensor::new(shape, act.data().iter().map(|v| v.as_f64()).collect())?;
        let weights: Vec<f64> = grads[branch].data().iter().map(|v| v.as_f64()).collect();
        let map = weighted_relu_map(&activations, &weights)?;
        Ok(BranchAttention { activations, weights, map })
    };
    Ok([build(LATERAL)?, build(MEDIAL)?])
}

/// Ensemble attention for one class, plus the maps' projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPair {
    pub class: usize,
    pub lateral: Tensor<f64>,
    pub medial: Tensor<f64>,
}

impl AttentionPair {
    pub fn from_branches(class: usize, b: &[BranchAttention; 2]) -> Self {
        AttentionPair { class, lateral: b[LATERAL].map.clone(), medial: b[MEDIAL].map.clone() }
    }
}

/// Per-branch sum of the member maps (members in bundle order).
pub fn ensemble_attention(bundle: &EnsembleBundle, pair: &KneePatchPair<f32>, class: usize) -> Result<AttentionPair> {
    let mut acc: Option<AttentionPair> = None;
    for m in bundle.members() {
        let b = branch_attention(&m.model, pair, class)?;
        let next = AttentionPair::from_branches(class, &b);
        acc = Some(match acc {
            None => next,
            Some(mut a) => {
                if a.lateral.shape() != next.lateral.shape() {
                    return Err(Error::shape(format!(
                        "member seed {} gives {:?} maps, earlier members {:?}",
                        m.info.seed,
                        next.lateral.shape(),
                        a.lateral.shape()
                    )));
                }
                a.lateral.add_assign(&next.lateral)?;
                a.medial.add_assign(&next.medial)?;
                a
            }
        });
    }
    acc.ok_or_else(|| Error::Empty("ensemble bundle has no members".into()))
}

/// Upsamples both maps to the patch size, flips the medial one back, places
/// them on a zero canvas (summing any overlap) and min-max normalizes.
/// Identically constant canvases are returned as zeros.
pub fn project(pair: &AttentionPair, geom: &PatchGeometry) -> Result<GrayImage<f32>> {
    let s = geom.side;
    if s == 0 || s > geom.canvas || geom.offset_k + s > geom.canvas {
        return Err(Error::OutOfBounds(format!("patch geometry {geom:?} does not fit its canvas")));
    }
    if pair.lateral.shape() != pair.medial.shape() || pair.lateral.rank() != 2 {
        return Err(Error::shape(format!(
            "attention maps must be equal X×Y, got {:?} and {:?}",
            pair.lateral.shape(),
            pair.medial.shape()
        )));
    }
    let (x, y) = (pair.lateral.shape()[0], pair.lateral.shape()[1]);
    let lat = resize_bilinear_f64(pair.lateral.data(), y, x, s, s);
    let med = resize_bilinear_f64(pair.medial.data(), y, x, s, s);
    let n = geom.canvas;
    let mut canvas = vec![0.0f64; n * n];
    let (lx, ly, _, _) = geom.lateral_rect();
    let (mx, my, _, _) = geom.medial_rect();
    for r in 0..s {
        for c in 0..s {
            canvas[(ly + r) * n + lx + c] += lat[r * s + c];
            canvas[(my + r) * n + mx + c] += med[r * s + (s - 1 - c)];
        }
    }
    let lo = canvas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = canvas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values: Vec<f32> = if hi > lo {
        canvas.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.0; n * n]
    };
    GrayImage::new(n, n, values)
}

/// Jet colormap of a value in [0, 1].
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

pub const OVERLAY_ALPHA: f32 = 0.5;

/// Per-pixel blend `(1 − α·m)·gray + α·m·jet(m)` as interleaved RGB.
pub fn composite(map: &GrayImage<f32>, source: &Gray8) -> Result<Vec<u8>> {
    if (map.width(), map.height()) != (source.width(), source.height()) {
        return Err(Error::shape(format!(
            "map {}×{} and source {}×{} differ",
            map.width(),
            map.height(),
            source.width(),
            source.height()
        )));
    }
    let mut rgb = Vec::with_capacity(3 * map.pixels().len());
    for (&m, &g) in map.pixels().iter().zip(source.pixels()) {
        let a = OVERLAY_ALPHA * m.clamp(0.0, 1.0);
        for c in jet(m) {
            let v = (1.0 - a) * g as f32 + a * 255.0 * c;
            rgb.push(v.round_ties_even().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(rgb)
}

pub fn encode_raw_map(map: &GrayImage<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * map.pixels().len());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    for v in map.pixels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw_map(bytes: &[u8]) -> Result<GrayImage<f32>> {
    if bytes.len() < 8 {
        return Err(Error::invalid("raw map shorter than its header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * w * h {
        return Err(Error::invalid(format!("raw map of {}×{} needs {} bytes, got {}", w, h, 8 + 4 * w * h, bytes.len())));
    }
    let values = bytes[8..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    GrayImage::new(w, h, values)
}

#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub raw: PathBuf,
    pub source: PathBuf,
    pub composite: PathBuf,
}

/// Writes `<stem>.raw` (map), `<stem>_source.pgm` and `<stem>_overlay.ppm`.
pub fn render_heatmap(map: &GrayImage<f32>, source: &Gray8, dir: &Path, stem: &str) -> Result<HeatmapFiles> {
    let rgb = composite(map, source)?;
    fs::create_dir_all(dir)?;
    let files = HeatmapFiles {
        raw: dir.join(format!("{stem}.raw")),
        source: dir.join(format!("{stem}_source.pgm")),
        composite: dir.join(format!("{stem}_overlay.ppm")),
    };
    fs::write(&files.raw, encode_raw_map(map))?;
    write_pgm8(source, &files.source)?;
    write_ppm(map.width(), map.height(), &rgb, &files.composite)?;
    Ok(files)
}

/// Text sidecar: class, fused probabilities and member metadata.
pub fn render_sidecar(image_id: &str, class: usize, class_was_predicted: bool, probs: &ProbabilityVector, bundle: &EnsembleBundle) -> String {
    let mut s = String::new();
    writeln!(s, "image_id\t{image_id}").unwrap();
    writeln!(s, "class\t{class}\t{}", if class_was_predicted { "predicted" } else { "requested" }).unwrap();
    for (j, p) in probs.p.iter().enumerate() {
        writeln!(s, "p{j}\t{p}").unwrap();
    }
    for m in bundle.members() {
        let k = m.info.val_kappa.map_or("none".to_string(), |k| k.to_string());
        writeln!(s, "member\t{}\t{}\t{k}", m.info.seed, m.info.iteration).unwrap();
    }
    s
}

/// Share of the map's total mass inside `mask` (non-zero pixels), divided by
/// the mask's share of `region` (non-zero pixels). 1 means no preference.
pub fn mass_enrichment(map: &GrayImage<f32>, mask: &Gray8, region: &Gray8) -> Option<f64> {
    let mut total = 0.0;
    let mut inside = 0.0;
    let mut region_px = 0usize;
    let mut mask_px = 0usize;
    for ((&m, &k), &r) in map.pixels().iter().zip(mask.pixels()).zip(region.pixels()) {
        if r == 0 {
            continue;
        }
        region_px += 1;
        total += m as f64;
        if k != 0 {
            inside += m as f64;
            mask_px += 1;
        }
    }
    (total > 0.0 && mask_px > 0).then(|| (inside / total) / (mask_px as f64 / region_px as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Provenance, SiameseConfig};
    use crate::nn::Mode;

    fn geom() -> PatchGeometry {
        PatchGeometry::new(300, 128, 100)
    }

    fn pair(lat: Vec<f64>, med: Vec<f64>, side: usize) -> AttentionPair {
        AttentionPair {
            class: 0,
            lateral: Tensor::new(&[side, side], lat).unwrap(),
            medial: Tensor::new(&[side, side], med).unwrap(),
        }
    }

    #[test]
    fn constant_single_map() {
        let a = Tensor::full(&[1, 4, 4], 1.0);
        assert!(weighted_relu_map(&a, &[2.0]).unwrap().data().iter().all(|&v| v == 2.0));
        let a = Tensor::from_fn(&[3, 4, 4], |i| (i % 7) as f64);
        assert!(weighted_relu_map(&a, &[-1.0, -0.5, -2.0]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_and_constant_projection() {
        let z = project(&pair(vec![0.0; 100], vec![0.0; 100], 10), &geom()).unwrap();
        assert!(z.pixels().iter().all(|&v| v == 0.0));
        let c = project(&pair(vec![3.0; 100], vec![3.0; 100], 10), &geom()).unwrap();
        for y in 0..300 {
            for x in 0..300 {
                let inside = (100..228).contains(&y) && !(128..172).contains(&x);
                assert_eq!(c.get(x, y), if inside { 1.0 } else { 0.0 }, "({x},{y})");
            }
        }
    }

    #[test]
    fn medial_delta_lands_top_right() {
        let mut med = vec![0.0; 100];
        med[0] = 1.0;
        let p = project(&pair(vec![0.0; 100], med, 10), &geom()).unwrap();
        let (mut bx, mut by, mut best) = (0, 0, -1.0f32);
        for y in 0..300 {
            for x in 0..300 {
                if p.get(x, y) > best {
                    best = p.get(x, y);
                    bx = x;
                    by = y;
                }
            }
        }
        // map cell (0,0) covers patch pixels [0, 12.8); after the flip it is
        // the right-most columns of the medial rectangle, top rows
        assert!(bx >= 300 - 13 && by < 100 + 13, "peak at ({bx},{by})");
    }

    #[test]
    fn flip_coherence() {
        let lat: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64).collect();
        let med: Vec<f64> = (0..100).map(|i| ((i * 13) % 7) as f64).collect();
        let a = project(&pair(lat.clone(), med.clone(), 10), &geom()).unwrap();
        let b = project(&pair(med, lat, 10), &geom()).unwrap();
        assert_eq!(a.flip_horizontal(), b);
    }

    #[test]
    fn mismatched_maps_rejected() {
        let p = AttentionPair { class: 0, lateral: Tensor::zeros(&[10, 10]), medial: Tensor::zeros(&[8, 8]) };
        assert!(project(&p, &geom()).is_err());
        let bad = PatchGeometry::new(300, 128, 200);
        assert!(project(&pair(vec![0.0; 100], vec![0.0; 100], 10), &bad).is_err());
    }

    #[test]
    fn composite_extremes() {
        let src = Gray8::from_fn(8, 8, |x, y| (x * 20 + y) as u8);
        let zero = GrayImage::<f32>::filled(8, 8, 0.0);
        let rgb = composite(&zero, &src).unwrap();
        for (i, &g) in src.pixels().iter().enumerate() {
            assert_eq!(&rgb[3 * i..3 * i + 3], &[g, g, g]);
        }
        let one = GrayImage::<f32>::filled(8, 8, 1.0);
        let rgb = composite(&one, &src).unwrap();
        let j = jet(1.0);
        for (i, &g) in src.pixels().iter().enumerate() {
            for c in 0..3 {
                let want = (0.5 * g as f32 + 0.5 * 255.0 * j[c]).round_ties_even() as u8;
                assert_eq!(rgb[3 * i + c], want);
            }
        }
    }

    #[test]
    fn raw_map_round_trip() {
        let map = GrayImage::new(3, 2, vec![0.0f32, 0.1, 0.25, 1.0, 1e-7, 0.999]).unwrap();
        assert_eq!(decode_raw_map(&encode_raw_map(&map)).unwrap(), map);
        assert!(decode_raw_map(&[0u8; 5]).is_err());
    }

    #[test]
    fn class_out_of_range_rejected() {
        let mut cfg = SiameseConfig::with_filters(2);
        cfg.input_side = 64;
        let mut model = SiameseModel::<f64>::build(cfg, 1).unwrap();
        model.set_mode(Mode::Eval);
        let p = KneePatchPair {
            lateral: Tensor::full(&[1, 64, 64], 0.5),
            medial_flipped: Tensor::full(&[1, 64, 64], 0.25),
            provenance: Provenance::default(),
        };
        assert!(branch_attention(&model, &p, 5).is_err());
        let b = branch_attention(&model, &p, 3).unwrap();
        assert!(b.iter().all(|x| x.map.data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn linear_probe_oracle() {
        let mut cfg = SiameseConfig::with_filters(2);
        cfg.input_side = 64;
        let mut model = SiameseModel::<f64>::build(cfg, 7).unwrap();
        model.set_mode(Mode::Eval);
        let p = KneePatchPair {
            lateral: Tensor::from_fn(&[1, 64, 64], |i| ((i * 31) % 97) as f64 / 97.0),
            medial_flipped: Tensor::from_fn(&[1, 64, 64], |i| ((i * 17) % 89) as f64 / 89.0),
            provenance: Provenance::default(),
        };
        let w = model.param("fc.weight").unwrap().clone();
        let bias = model.param("fc.bias").unwrap().clone();
        let f2 = w.shape()[1];
        let f = f2 / 2;
        let logits = model.predict_logits(&PairBatch::from_pairs(&[&p]).unwrap()).unwrap();
        for class in 0..5 {
            let b = branch_attention(&model, &p, class).unwrap();
            // the head is GAP followed by one linear layer, so the weights
            // are the class row of that layer, split per branch
            let row = &w.data()[class * f2..(class + 1) * f2];
            assert_eq!(b[LATERAL].weights, row[..f].to_vec());
            assert_eq!(b[MEDIAL].weights, row[f..].to_vec());
            // recompute the logit from the cached activations
            let mut z = bias.data()[class];
            for (br, off) in [(LATERAL, 0), (MEDIAL, f)] {
                let a = &b[br].activations;
                let xy = a.shape()[1] * a.shape()[2];
                for k in 0..f {
                    let mean: f64 = a.data()[k * xy..(k + 1) * xy].iter().sum::<f64>() / xy as f64;
                    z += row[off + k] * mean;
                }
                for (i, &m) in b[br].map.data().iter().enumerate() {
                    let want: f64 = (0..f).map(|k| row[off + k] * a.data()[k * xy + i]).sum::<f64>().max(0.0);
                    assert!((m - want).abs() < 1e-12);
                }
            }
            assert!((z - logits.data()[class]).abs() < 1e-10, "class {class}: {z} vs {}", logits.data()[class]);
        }
    }
}
