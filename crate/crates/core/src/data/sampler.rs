//! Class-balanced oversampling of the training set.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub bootstrap_b: usize,
    /// Draws per class per epoch; `None` means `round(n_cat · B)` where
    /// `n_cat` is the mean class size.
    pub per_epoch_per_class: Option<usize>,
    /// Draw with replacement (the default); off is a debugging mode that
    /// requires `per_epoch_per_class` ≤ every class size.
    pub replacement: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { bootstrap_b: 1, per_epoch_per_class: Some(300), replacement: true }
    }
}

impl SamplerConfig {
    pub fn per_class(&self, class_sizes: &[usize]) -> usize {
        self.per_epoch_per_class.unwrap_or_else(|| {
            let n_cat = class_sizes.iter().sum::<usize>() as f64 / class_sizes.len().max(1) as f64;
            (n_cat * self.bootstrap_b as f64).round() as usize
        })
    }
}

/// Groups record indices by class label.
pub fn group_by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

/// One epoch of record indices: `per_class` draws from every class, then a
/// global shuffle.
pub fn oversample_epoch<R: Rng + ?Sized>(groups: &[Vec<usize>], cfg: &SamplerConfig, rng: &mut R) -> Result<Vec<usize>> {
    if let Some(class) = groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass { class });
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let per_class = cfg.per_class(&sizes);
    let mut out = Vec::with_capacity(per_class * groups.len());
    for (class, group) in groups.iter().enumerate() {
        if cfg.replacement {
            out.extend((0..per_class).map(|_| group[rng.random_range(0..group.len())]));
        } else {
            if per_class > group.len() {
                return Err(Error::invalid(format!(
                    "class {class} has {} records, cannot draw {per_class} without replacement",
                    group.len()
                )));
            }
            let mut g = group.clone();
            g.shuffle(rng);
            out.extend_from_slice(&g[..per_class]);
        }
    }
    out.shuffle(rng);
    Ok(out)
}
