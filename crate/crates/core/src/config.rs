//! Run configuration: one `key = value` file with `[section]` headers that
//! pins every knob of a run, and the hash that names the run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, PreprocessConfig, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::SiameseConfig;
use crate::train::{LossKind, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Global seed kept with the run. Training streams come from `train.seeds`.
    pub seed: u64,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub preprocess: PreprocessConfig,
    /// `input_side` always follows `preprocess.patch_side`.
    pub model: SiameseConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            manifest: PathBuf::from("data/manifest.tsv"),
            out_dir: PathBuf::from("runs"),
            preprocess: PreprocessConfig::default(),
            model: SiameseConfig::default(),
            train: TrainConfig::default(),
            // epoch size follows the data: round(mean class size × 15) per class
            sampler: SamplerConfig { bootstrap_b: 15, per_epoch_per_class: None, replacement: true },
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    /// The phantom-scale recipe: N=32, batch 32, 2000 iterations.
    pub fn desk() -> Self {
        let d = RunConfig::default();
        RunConfig {
            model: SiameseConfig::with_filters(32),
            train: TrainConfig { batch_size: 32, total_iterations: 2000, eval_every: 250, ..d.train },
            sampler: SamplerConfig::default(),
            ..d
        }
    }

    /// Every problem with the configuration, in file order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut take = |prefix: &str, r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(list)) => p.extend(list.into_iter().map(|m| format!("{prefix}: {m}"))),
            Err(e) => p.push(format!("{prefix}: {e}")),
        };
        take("preprocess", self.preprocess.validate());
        take("model", self.model.validate());
        take("augment", self.augment.validate());
        p.extend(self.train.problems());
        if self.sampler.bootstrap_b == 0 {
            p.push("sampler.bootstrap_b must be positive".into());
        }
        if self.sampler.per_epoch_per_class == Some(0) {
            p.push("sampler.per_epoch_per_class must be positive or auto".into());
        }
        if self.model.input_side != self.preprocess.patch_side {
            p.push(format!(
                "model input side {} differs from preprocess.patch_side {}",
                self.model.input_side, self.preprocess.patch_side
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Canonical text of every field that changes what a run computes.
    /// Output and manifest locations are excluded.
    fn semantic_text(&self) -> String {
        let mut s = String::new();
        for (section, entries) in self.sections() {
            if section == "paths" {
                continue;
            }
            for (k, v, _) in entries {
                writeln!(s, "{section}.{k}={v}").unwrap();
            }
        }
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.semantic_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `out_dir/run-<first 12 hex digits of the hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("run-{}", &self.hash()[..12]))
    }

    fn sections(&self) -> Vec<(&'static str, Vec<(&'static str, String, &'static str)>)> {
        let p = &self.preprocess;
        let m = &self.model;
        let t = &self.train;
        let sa = &self.sampler;
        let a = &self.augment;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("run", vec![("seed", self.seed.to_string(), "global seed, recorded with the run; member streams derive from train.seeds")]),
            (
                "paths",
                vec![
                    ("manifest", self.manifest.display().to_string(), "dataset manifest (relative to this file)"),
                    ("out_dir", self.out_dir.display().to_string(), "parent of run directories (relative to this file)"),
                ],
            ),
            (
                "preprocess",
                vec![
                    ("roi_mm", p.roi_mm.to_string(), "square ROI side at the image centre, mm"),
                    ("crop_mm", p.crop_mm.to_string(), "concentric crop inside the ROI, mm"),
                    ("resize_px", p.resize_px.to_string(), "side of the resized square, px"),
                    ("patch_side", p.patch_side.to_string(), "patch side S, px"),
                    ("offset_k", p.offset_k.to_string(), "vertical patch offset K, px"),
                    ("trunc_low", p.trunc_low.to_string(), "lower truncation percentile"),
                    ("trunc_high", p.trunc_high.to_string(), "upper truncation percentile"),
                    ("exposure_fix", p.exposure_fix.to_string(), "gamma-correct over/under-exposed images"),
                ],
            ),
            (
                "model",
                vec![
                    ("n_filters", m.n_filters.to_string(), "filters in the first layer, N"),
                    ("filter_schedule", list(&m.filter_schedule), "per-layer multipliers of N"),
                    ("strides", list(&m.strides), "per-layer conv strides"),
                    (
                        "pool_after",
                        m.pool_after.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
                        "2x2 max-pool after each layer",
                    ),
                    ("shared", m.shared.to_string(), "one parameter set for both branches"),
                ],
            ),
            (
                "train",
                vec![
                    ("lr", t.lr.to_string(), "Adam learning rate"),
                    ("weight_decay", t.weight_decay.to_string(), "L2 decay on weights"),
                    ("dropout_p", t.dropout_p.to_string(), "dropout before the classifier"),
                    ("batch_size", t.batch_size.to_string(), "pairs per iteration"),
                    ("total_iterations", t.total_iterations.to_string(), "optimizer steps per member"),
                    ("eval_every", t.eval_every.to_string(), "validation and snapshot interval"),
                    ("seeds", t.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","), "one member per seed"),
                    ("loss", loss_name(t.loss).to_string(), "cross_entropy or combined"),
                    ("augment", t.augment.to_string(), "augment training batches"),
                ],
            ),
            (
                "sampler",
                vec![
                    ("bootstrap_b", sa.bootstrap_b.to_string(), "bootstrap multiplier B"),
                    (
                        "per_epoch_per_class",
                        sa.per_epoch_per_class.map_or("auto".to_string(), |n| n.to_string()),
                        "draws per class per epoch, or auto",
                    ),
                    ("replacement", sa.replacement.to_string(), "draw with replacement"),
                ],
            ),
            (
                "augment",
                vec![
                    ("rotation_deg", a.rotation_deg.to_string(), "rotation range, degrees"),
                    ("brightness", a.brightness.to_string(), "additive offset range, gray levels"),
                    ("contrast", a.contrast.to_string(), "contrast factor range around 1"),
                    ("gamma", a.gamma.to_string(), "gamma range around 1"),
                    ("jitter_px", a.jitter_px.to_string(), "translation range, px"),
                    ("probability", a.probability.to_string(), "per-op application probability"),
                ],
            ),
        ]
    }

    /// Full config file text with every field and its meaning.
    pub fn render(&self) -> String {
        let mut s = String::from("# klgrade run configuration\n");
        for (section, entries) in self.sections() {
            writeln!(s, "\n[{section}]").unwrap();
            for (k, v, doc) in entries {
                writeln!(s, "# {doc}").unwrap();
                writeln!(s, "{k} = {v}").unwrap();
            }
        }
        s
    }

    /// Parses a config file. Missing keys keep their defaults; unknown keys
    /// and bad values are all reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut problems = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let at = i + 1;
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {at}: expected `key = value`, got `{line}`"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if let Err(m) = c.set(&section, key, value) {
                problems.push(format!("line {at}: {section}.{key}: {m}"));
            }
        }
        c.model.input_side = c.preprocess.patch_side;
        problems.extend(c.problems());
        if problems.is_empty() {
            Ok(c)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut c = RunConfig::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.manifest, &mut c.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let p = &mut self.preprocess;
        let m = &mut self.model;
        let t = &mut self.train;
        let sa = &mut self.sampler;
        let a = &mut self.augment;
        match (section, key) {
            ("run", "seed") => self.seed = num(v)?,
            ("paths", "manifest") => self.manifest = PathBuf::from(v),
            ("paths", "out_dir") => self.out_dir = PathBuf::from(v),
            ("preprocess", "roi_mm") => p.roi_mm = num(v)?,
            ("preprocess", "crop_mm") => p.crop_mm = num(v)?,
            ("preprocess", "resize_px") => p.resize_px = num(v)?,
            ("preprocess", "patch_side") => p.patch_side = num(v)?,
            ("preprocess", "offset_k") => p.offset_k = num(v)?,
            ("preprocess", "trunc_low") => p.trunc_low = num(v)?,
            ("preprocess", "trunc_high") => p.trunc_high = num(v)?,
            ("preprocess", "exposure_fix") => p.exposure_fix = num(v)?,
            ("model", "n_filters") => m.n_filters = num(v)?,
            ("model", "filter_schedule") => m.filter_schedule = nums(v)?,
            ("model", "strides") => m.strides = nums(v)?,
            ("model", "pool_after") => m.pool_after = nums(v)?,
            ("model", "shared") => m.shared = num(v)?,
            ("train", "lr") => t.lr = num(v)?,
            ("train", "weight_decay") => t.weight_decay = num(v)?,
            ("train", "dropout_p") => t.dropout_p = num(v)?,
            ("train", "batch_size") => t.batch_size = num(v)?,
            ("train", "total_iterations") => t.total_iterations = num(v)?,
            ("train", "eval_every") => t.eval_every = num(v)?,
            ("train", "seeds") => t.seeds = nums(v)?,
            ("train", "loss") => {
                t.loss = match v {
                    "cross_entropy" => LossKind::CrossEntropy,
                    "combined" => LossKind::Combined,
                    _ => return Err(format!("unknown loss `{v}` (cross_entropy or combined)")),
                }
            }
            ("train", "augment") => t.augment = num(v)?,
            ("sampler", "bootstrap_b") => sa.bootstrap_b = num(v)?,
            ("sampler", "per_epoch_per_class") => {
                sa.per_epoch_per_class = if v == "auto" { None } else { Some(num(v)?) }
            }
            ("sampler", "replacement") => sa.replacement = num(v)?,
            ("augment", "rotation_deg") => a.rotation_deg = num(v)?,
            ("augment", "brightness") => a.brightness = num(v)?,
            ("augment", "contrast") => a.contrast = num(v)?,
            ("augment", "gamma") => a.gamma = num(v)?,
            ("augment", "jitter_px") => a.jitter_px = num(v)?,
            ("augment", "probability") => a.probability = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }
}

fn loss_name(l: LossKind) -> &'static str {
    match l {
        LossKind::CrossEntropy => "cross_entropy",
        LossKind::Combined => "combined",
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn nums<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}
