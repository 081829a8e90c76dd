use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kl_siamese::config::RunConfig;
use kl_siamese::data::dataset::prepare_sample;
use kl_siamese::data::image::{write_pgm16, write_pgm8};
use kl_siamese::data::{
    dataset_layout, dataset_phantom, load_manifest, make_pair, prepare_records, thread_pool, validate_splits,
    write_manifest, DatasetRecord, Gray8, PreprocessConfig, Split,
};
use kl_siamese::gradcam::{ensemble_attention, project, render_heatmap, render_sidecar};
use kl_siamese::metrics::{read_predictions, render_report, write_predictions, EvalReport};
use kl_siamese::model::NUM_CLASSES;
use kl_siamese::train::{
    ensemble_predict, load_bundle, predict_samples, run_ensemble_training, write_bundle, write_history, EvalRecord,
    LoadedBundle, TrainData,
};
use kl_siamese::Tensor;

use crate::{AttentionArgs, EvalArgs, MetricsArgs, PreprocessArgs, SynthArgs, TrainArgs};

/// Bad invocation that clap cannot detect on its own.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A member aborted on a non-finite loss or gradient.
#[derive(Debug)]
struct Numeric(String);

impl fmt::Display for Numeric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numeric {}

/// 1 usage, 2 data or validation, 3 numeric failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if cause.is::<Numeric>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<kl_siamese::Error>() {
            return match e {
                kl_siamese::Error::NonFiniteLoss { .. } | kl_siamese::Error::NonFiniteGradient { .. } => 3,
                _ => 2,
            };
        }
    }
    2
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

const MANIFEST_FILE: &str = "manifest.tsv";
const CONFIG_FILE: &str = "config.ini";

pub fn synth(a: SynthArgs) -> Result<()> {
    let val = a.val.unwrap_or(a.count / 7);
    let test = a.test.unwrap_or(a.count / 7);
    if val + test > a.count {
        return Err(usage(format!("val {val} + test {test} exceed count {}", a.count)));
    }
    let manifest = a.out.join(MANIFEST_FILE);
    if manifest.exists() && !a.force {
        bail!("{} already exists; pass --force to overwrite", manifest.display());
    }
    let images = a.out.join("images");
    let masks = a.out.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).with_context(|| format!("cannot create {}", d.display()))?;
    }
    let counts = [(Split::Train, a.count - val - test), (Split::Val, val), (Split::Test, test)];
    let mut records = Vec::new();
    for (split, grade, i) in dataset_layout(&counts) {
        let ph = dataset_phantom(a.seed, split, grade, i, a.size_px, a.pixel_spacing_mm)?;
        let stem = ph.record.id();
        write_pgm16(&ph.image, a.out.join(&ph.record.image_path))?;
        write_pgm8(&ph.osteophyte_mask, masks.join(format!("{stem}.pgm")))?;
        records.push(ph.record);
    }
    validate_splits(&records)?;
    write_manifest(&records, &manifest)?;
    println!("{} images ({} train, {val} val, {test} test per grade) -> {}", records.len(), counts[0].1, manifest.display());
    Ok(())
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn patch_image(t: &Tensor<f32>) -> Result<Gray8> {
    let side = *t.shape().last().unwrap_or(&0);
    let values: Vec<f64> = t.data().iter().map(|&v| v as f64 * 255.0).collect();
    Ok(Gray8::from_f64(side, side, &values))
}

pub fn preprocess(a: PreprocessArgs, threads: usize) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.preprocess,
        None => PreprocessConfig::default(),
    };
    let records = load_manifest(&a.manifest)?;
    let pool = thread_pool(threads)?;
    let samples = prepare_records(&records, &manifest_dir(&a.manifest), &cfg, &pool)?;
    fs::create_dir_all(&a.out)?;
    for s in &samples {
        write_pgm8(&s.image, a.out.join(format!("{}.pgm", s.id)))?;
        let pair = make_pair(s, &cfg, None)?;
        write_pgm8(&patch_image(&pair.lateral)?, a.out.join(format!("{}_lateral.pgm", s.id)))?;
        write_pgm8(&patch_image(&pair.medial_flipped)?, a.out.join(format!("{}_medial_flipped.pgm", s.id)))?;
    }
    println!("{} images preprocessed -> {}", samples.len(), a.out.display());
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir()?.join(p) })
}

pub fn train(a: TrainArgs, threads: usize) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config).with_context(|| format!("config {}", a.config.display()))?;
    cfg.manifest = absolute(&cfg.manifest)?;
    cfg.out_dir = absolute(&cfg.out_dir)?;
    let run_dir = cfg.run_dir();
    if run_dir.exists() {
        if !a.force {
            bail!("run directory {} exists for this config; pass --force to replace it", run_dir.display());
        }
        fs::remove_dir_all(&run_dir)?;
    }
    let records = load_manifest(&cfg.manifest)?;
    validate_splits(&records)?;
    let used: Vec<DatasetRecord> = records.into_iter().filter(|r| r.split != Split::Test).collect();
    let pool = thread_pool(threads)?;
    let samples = prepare_records(&used, &manifest_dir(&cfg.manifest), &cfg.preprocess, &pool)?;
    let (train, val): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.record.split == Split::Train);
    if train.is_empty() {
        bail!("manifest {} has no training records", cfg.manifest.display());
    }
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join(CONFIG_FILE), cfg.render())?;
    eprintln!("run {} : {} train, {} val", run_dir.display(), train.len(), val.len());

    let data =
        TrainData { train: &train, val: &val, preprocess: &cfg.preprocess, augment: &cfg.augment, sampler: &cfg.sampler };
    let progress = |seed: u64, r: &EvalRecord| {
        eprintln!(
            "seed {seed} iter {} loss {:.4} val kappa {:.4} mse {:.4} bacc {:.4}",
            r.iteration, r.train_loss, r.val.kappa, r.val.mse, r.val.balanced_accuracy
        );
    };
    match run_ensemble_training(&cfg.model, data, &cfg.train, threads, Some(&progress)) {
        Ok(run) => {
            for h in &run.histories {
                write_history(h, &run_dir)?;
            }
            let descriptor = write_bundle(&run.bundle, &run_dir, Some(&cfg.manifest))?;
            for m in run.bundle.members() {
                let k = m.info.val_kappa.map_or("n/a".to_string(), |k| format!("{k:.4}"));
                eprintln!("member seed {} -> iteration {} (val kappa {k})", m.info.seed, m.info.iteration);
            }
            println!("{}", descriptor.display());
            Ok(())
        }
        Err(f) => {
            for h in &f.survivors {
                write_history(h, &run_dir)?;
            }
            for ab in &f.failures {
                write_history(&ab.history, &run_dir)?;
            }
            if f.is_numeric() {
                Err(Numeric(f.to_string()).into())
            } else {
                bail!("{f}")
            }
        }
    }
}

/// Bundle, the directory holding it, and the config saved next to it.
fn open_run(bundle: &Path) -> Result<(LoadedBundle, PathBuf, RunConfig)> {
    let loaded = load_bundle(bundle).with_context(|| format!("cannot load bundle {}", bundle.display()))?;
    let dir = if bundle.is_dir() { bundle.to_path_buf() } else { manifest_dir(bundle) };
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg = if cfg_path.exists() {
        RunConfig::load(&cfg_path)?
    } else {
        eprintln!("warning: no {CONFIG_FILE} beside the bundle, using default preprocessing");
        RunConfig::default()
    };
    if loaded.bundle.input_side() != cfg.preprocess.patch_side {
        bail!(
            "bundle expects {}-pixel patches, preprocessing yields {}",
            loaded.bundle.input_side(),
            cfg.preprocess.patch_side
        );
    }
    Ok((loaded, dir, cfg))
}

fn pick_manifest(arg: Option<PathBuf>, loaded: &LoadedBundle) -> Result<PathBuf> {
    arg.or_else(|| loaded.train_manifest.clone())
        .ok_or_else(|| usage("the bundle records no manifest; pass --manifest"))
}

pub fn eval(a: EvalArgs, threads: usize) -> Result<()> {
    let split: Split = a.split.parse().map_err(|_| usage(format!("unknown split `{}`", a.split)))?;
    let (loaded, dir, cfg) = open_run(&a.bundle)?;
    let manifest = pick_manifest(a.manifest, &loaded)?;
    let records: Vec<DatasetRecord> = load_manifest(&manifest)?.into_iter().filter(|r| r.split == split).collect();
    if records.is_empty() {
        bail!("manifest {} has no `{split}` records", manifest.display());
    }
    if split == Split::Train {
        if !a.allow_train_split {
            bail!("refusing to evaluate on the training split without --allow-train-split");
        }
    } else if let Some(tm) = &loaded.train_manifest {
        let trained: BTreeSet<String> =
            load_manifest(tm)?.into_iter().filter(|r| r.split == Split::Train).map(|r| r.subject_id).collect();
        let leaked: BTreeSet<String> =
            records.iter().filter(|r| trained.contains(&r.subject_id)).map(|r| r.subject_id.clone()).collect();
        if !leaked.is_empty() {
            return Err(kl_siamese::Error::SplitLeakage { subjects: leaked.into_iter().collect() }.into());
        }
    } else {
        eprintln!("warning: bundle records no training manifest, leakage check skipped");
    }
    let pool = thread_pool(threads)?;
    let samples = prepare_records(&records, &manifest_dir(&manifest), &cfg.preprocess, &pool)?;
    let preds = predict_samples(&loaded.bundle, &samples, &cfg.preprocess)?;
    let out = a.out.unwrap_or_else(|| dir.join(format!("eval-{split}")));
    fs::create_dir_all(&out)?;
    write_predictions(&preds, out.join("predictions.tsv"))?;
    let report = EvalReport::from_predictions(&preds)?;
    render_report(&report, &out)?;
    print!("{}", report.summary());
    Ok(())
}

pub fn attention(a: AttentionArgs) -> Result<()> {
    if let Some(c) = a.class {
        if c >= NUM_CLASSES {
            return Err(usage(format!("class {c} outside 0..{NUM_CLASSES}")));
        }
    }
    let (loaded, dir, cfg) = open_run(&a.bundle)?;
    let manifest = pick_manifest(a.manifest, &loaded)?;
    let record = load_manifest(&manifest)?
        .into_iter()
        .find(|r| r.id() == a.image_id)
        .with_context(|| format!("unknown image id `{}` in {}", a.image_id, manifest.display()))?;
    let sample = prepare_sample(&record, &manifest_dir(&manifest), &cfg.preprocess)?;
    let pair = make_pair(&sample, &cfg.preprocess, None)?;
    let probs = ensemble_predict(&loaded.bundle, &pair)?;
    let class = a.class.unwrap_or_else(|| probs.argmax());
    let maps = ensemble_attention(&loaded.bundle, &pair, class)?;
    let canvas = project(&maps, &cfg.preprocess.geometry())?;
    let out = a.out.unwrap_or_else(|| dir.join("attention"));
    let stem = format!("{}_class{class}", sample.id);
    let files = render_heatmap(&canvas, &sample.image, &out, &stem)?;
    let sidecar = out.join(format!("{stem}.txt"));
    fs::write(&sidecar, render_sidecar(&sample.id, class, a.class.is_none(), &probs, &loaded.bundle))?;
    for p in [&files.raw, &files.source, &files.composite, &sidecar] {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let preds = read_predictions(&a.predictions)
        .with_context(|| format!("cannot read predictions {}", a.predictions.display()))?;
    let report = EvalReport::from_predictions(&preds)?;
    render_report(&report, &a.out)?;
    print!("{}", report.summary());
    Ok(())
}
