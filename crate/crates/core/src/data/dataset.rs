//! Preprocessed-sample cache and deterministic, parallel batch assembly.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rayon::ThreadPool;

use super::augment::{augment, AugmentConfig};
use super::geometry::{extract_patch_pair, preprocess_image, PreprocessConfig};
use super::image::{read_pgm, Gray8};
use super::manifest::{DatasetRecord, Split};
use crate::error::{Error, Result};
use crate::model::{KneePatchPair, PairBatch};
use crate::rng::stream;

/// A record with its image already through the preprocessing chain.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub record: DatasetRecord,
    pub image: Gray8,
}

impl PreparedSample {
    pub fn grade(&self) -> usize {
        self.record.kl_grade as usize
    }
}

pub fn resolve_image_path(manifest_dir: &Path, record: &DatasetRecord) -> PathBuf {
    let p = Path::new(&record.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

pub fn thread_pool(threads: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

pub fn prepare_sample(record: &DatasetRecord, manifest_dir: &Path, cfg: &PreprocessConfig) -> Result<PreparedSample> {
    let raw = read_pgm(resolve_image_path(manifest_dir, record))?.into_u16();
    let image = preprocess_image(&raw, record.pixel_spacing_mm, record.side, cfg)?;
    Ok(PreparedSample { id: record.id(), record: record.clone(), image })
}

/// Reads and preprocesses every record; output order follows the input.
pub fn prepare_records(
    records: &[DatasetRecord],
    manifest_dir: &Path,
    cfg: &PreprocessConfig,
    pool: &ThreadPool,
) -> Result<Vec<PreparedSample>> {
    cfg.validate()?;
    pool.install(|| records.par_iter().map(|r| prepare_sample(r, manifest_dir, cfg)).collect())
}

pub fn split_samples(samples: &[PreparedSample], split: Split) -> Vec<PreparedSample> {
    samples.iter().filter(|s| s.record.split == split).cloned().collect()
}

/// Patch pair for one sample, optionally augmented at canvas size first.
pub fn make_pair(
    sample: &PreparedSample,
    cfg: &PreprocessConfig,
    augmentation: Option<(&AugmentConfig, u64)>,
) -> Result<KneePatchPair<f32>> {
    let mut pair = match augmentation {
        Some((aug, seed)) => {
            let img = augment(&sample.image, aug, &mut stream(seed, &[]));
            extract_patch_pair(&img, cfg.patch_side, cfg.offset_k)?
        }
        None => extract_patch_pair(&sample.image, cfg.patch_side, cfg.offset_k)?,
    };
    pair.provenance.image_id = sample.id.clone();
    Ok(pair)
}

/// Builds a training batch. Sample `i` of the batch is augmented with a
/// stream derived from `(epoch_seed, first_position + i)`, so the result
/// does not depend on the worker count.
pub fn assemble_batch(
    samples: &[PreparedSample],
    indices: &[usize],
    cfg: &PreprocessConfig,
    aug: Option<&AugmentConfig>,
    epoch_seed: u64,
    first_position: u64,
    pool: &ThreadPool,
) -> Result<(PairBatch<f32>, Vec<usize>)> {
    let pairs: Vec<KneePatchPair<f32>> = pool.install(|| {
        indices
            .par_iter()
            .enumerate()
            .map(|(i, &idx)| {
                let sample = samples.get(idx).ok_or_else(|| Error::invalid(format!("sample index {idx} out of range")))?;
                let seed = crate::rng::derive_seed(epoch_seed, &[first_position + i as u64]);
                make_pair(sample, cfg, aug.map(|a| (a, seed)))
            })
            .collect::<Result<_>>()
    })?;
    let refs: Vec<&KneePatchPair<f32>> = pairs.iter().collect();
    let targets = indices.iter().map(|&i| samples[i].grade()).collect();
    Ok((PairBatch::from_pairs(&refs)?, targets))
}
