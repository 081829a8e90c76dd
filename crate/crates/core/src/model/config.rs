use crate::error::{Error, Result};
use crate::nn::conv_out_extent;

pub const NUM_CLASSES: usize = 5;
pub const KERNEL_SIZE: usize = 3;
pub const CONV_LAYERS: usize = 5;
/// Input side the layout is validated against, and the final map it must produce.
pub const REFERENCE_SIDE: usize = 128;
pub const REFERENCE_FINAL_MAP: usize = 10;

/// Architecture of the two-branch network. The layer layout is data:
/// five 3×3 unpadded Conv-BN-ReLU blocks with per-layer filter multipliers,
/// strides and optional trailing 2×2 max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseConfig {
    /// Filters in the first layer (N).
    pub n_filters: usize,
    /// Per-layer multipliers of `n_filters`.
    pub filter_schedule: Vec<usize>,
    pub strides: Vec<usize>,
    pub pool_after: Vec<bool>,
    /// Patch side S in pixels.
    pub input_side: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
    /// One parameter set for both branches (true) or one per branch.
    pub shared: bool,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig::with_filters(64)
    }
}

impl SiameseConfig {
    /// Default layout: Conv(N,s2) Conv(N) Pool Conv(2N) Pool Conv(2N) Conv(4N).
    pub fn with_filters(n_filters: usize) -> Self {
        SiameseConfig {
            n_filters,
            filter_schedule: vec![1, 1, 2, 2, 4],
            strides: vec![2, 1, 1, 1, 1],
            pool_after: vec![false, true, true, false, false],
            input_side: REFERENCE_SIDE,
            num_classes: NUM_CLASSES,
            dropout_p: 0.2,
            shared: true,
        }
    }

    pub fn filters(&self, layer: usize) -> usize {
        self.n_filters * self.filter_schedule[layer]
    }

    /// Channels of the per-branch feature vector (F).
    pub fn branch_features(&self) -> usize {
        self.filters(CONV_LAYERS - 1)
    }

    /// Spatial side after every Conv-BN-ReLU block (and its pool, if any),
    /// or `None` if the input is too small for the layout.
    pub fn side_chain(&self, input_side: usize) -> Option<Vec<usize>> {
        let mut side = input_side;
        let mut chain = Vec::with_capacity(CONV_LAYERS);
        for layer in 0..CONV_LAYERS {
            side = conv_out_extent(side, KERNEL_SIZE, self.strides[layer])?;
            if self.pool_after[layer] {
                if side < 2 {
                    return None;
                }
                side /= 2;
            }
            chain.push(side);
        }
        Some(chain)
    }

    /// Side of the final per-branch activation map for the configured input.
    pub fn final_map_side(&self) -> Option<usize> {
        self.side_chain(self.input_side).and_then(|c| c.last().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_filters == 0 {
            problems.push("n_filters must be positive".to_string());
        }
        for (name, len) in [
            ("filter_schedule", self.filter_schedule.len()),
            ("strides", self.strides.len()),
            ("pool_after", self.pool_after.len()),
        ] {
            if len != CONV_LAYERS {
                problems.push(format!("{name} must have {CONV_LAYERS} entries, has {len}"));
            }
        }
        if self.filter_schedule.contains(&0) {
            problems.push("filter_schedule entries must be positive".into());
        }
        if self.strides.contains(&0) {
            problems.push("strides must be positive".into());
        }
        if self.num_classes != NUM_CLASSES {
            problems.push(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            problems.push(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if problems.is_empty() {
            match self.side_chain(REFERENCE_SIDE).and_then(|c| c.last().copied()) {
                Some(REFERENCE_FINAL_MAP) => {}
                other => problems.push(format!(
                    "layout maps a {REFERENCE_SIDE}×{REFERENCE_SIDE} input to {other:?}, \
                     expected a {REFERENCE_FINAL_MAP}×{REFERENCE_FINAL_MAP} final map"
                )),
            }
            if self.final_map_side().is_none() {
                problems.push(format!("input_side {} is too small for the layout", self.input_side));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Branch parameter prefixes: one shared set, or lateral and medial sets.
    pub fn branch_prefixes(&self) -> [&'static str; 2] {
        if self.shared {
            ["branch", "branch"]
        } else {
            ["lateral", "medial"]
        }
    }

    /// Every parameter as (name, shape), in build order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let prefixes: &[&str] = if self.shared { &["branch"] } else { &["lateral", "medial"] };
        for prefix in prefixes {
            let mut in_ch = 1;
            for layer in 0..CONV_LAYERS {
                let f = self.filters(layer);
                let i = layer + 1;
                out.push((format!("{prefix}.conv{i}.weight"), vec![f, in_ch, KERNEL_SIZE, KERNEL_SIZE]));
                out.push((format!("{prefix}.conv{i}.bias"), vec![f]));
                out.push((format!("{prefix}.bn{i}.gamma"), vec![f]));
                out.push((format!("{prefix}.bn{i}.beta"), vec![f]));
                in_ch = f;
            }
        }
        out.push(("fc.weight".into(), vec![self.num_classes, 2 * self.branch_features()]));
        out.push(("fc.bias".into(), vec![self.num_classes]));
        out
    }

    /// Batch-norm layers as (name, channels).
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        let prefixes: &[&str] = if self.shared { &["branch"] } else { &["lateral", "medial"] };
        prefixes
            .iter()
            .flat_map(|p| (0..CONV_LAYERS).map(move |l| (format!("{p}.bn{}", l + 1), self.filters(l))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_shape_chain() {
        let cfg = SiameseConfig::with_filters(64);
        assert_eq!(cfg.side_chain(128).unwrap(), vec![63, 30, 14, 12, 10]);
        assert_eq!(cfg.final_map_side(), Some(10));
        assert_eq!(cfg.branch_features(), 256);
        cfg.validate().unwrap();
    }

    #[test]
    fn layout_not_reaching_ten_is_rejected() {
        let mut cfg = SiameseConfig::with_filters(8);
        cfg.pool_after = vec![false, false, true, false, false];
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(ref p) if p[0].contains("final map")));
    }

    #[test]
    fn small_inputs_are_allowed_when_the_layout_fits() {
        let mut cfg = SiameseConfig::with_filters(2);
        cfg.input_side = 64;
        assert_eq!(cfg.final_map_side(), Some(2));
        cfg.validate().unwrap();
        cfg.input_side = 40;
        assert!(cfg.validate().is_err());
    }
}
