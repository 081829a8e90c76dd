//! On-disk layout of a training run: snapshot checkpoints, metrics logs
//! and the bundle descriptor.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::ensemble::{EnsembleBundle, EnsembleMember, MemberInfo};
use super::trainer::{EvalRecord, TrainHistory};
use crate::error::{Error, Result};
use crate::model;

pub const BUNDLE_FILE: &str = "bundle.txt";

pub fn checkpoint_name(seed: u64, iteration: u64) -> String {
    format!("seed{seed}_iter{iteration}.ckpt")
}

pub fn render_metrics_log(records: &[EvalRecord]) -> String {
    let mut s = String::from("iteration\ttrain_loss\tval_kappa\tval_mse\tval_balanced_accuracy\n");
    for r in records {
        writeln!(s, "{}\t{}\t{}\t{}\t{}", r.iteration, r.train_loss, r.val.kappa, r.val.mse, r.val.balanced_accuracy)
            .unwrap();
    }
    s
}

pub fn render_loss_log(losses: &[f64]) -> String {
    let mut s = String::from("iteration\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{}\t{l}", i + 1).unwrap();
    }
    s
}

/// Writes every snapshot checkpoint plus the metrics and loss logs of one member.
pub fn write_history(history: &TrainHistory, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for snap in &history.snapshots {
        model::save(&snap.model, dir.join(checkpoint_name(history.seed, snap.record.iteration)))?;
    }
    let records: Vec<EvalRecord> = history.snapshots.iter().map(|s| s.record.clone()).collect();
    fs::write(dir.join(format!("metrics_seed{}.tsv", history.seed)), render_metrics_log(&records))?;
    fs::write(dir.join(format!("loss_seed{}.tsv", history.seed)), render_loss_log(&history.losses))?;
    Ok(())
}

/// Writes the descriptor (and any member checkpoint not already on disk).
/// Checkpoint paths in the descriptor are relative to `dir`.
pub fn write_bundle(bundle: &EnsembleBundle, dir: &Path, train_manifest: Option<&Path>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut s = String::from("# ensemble bundle: member seed, iteration, validation kappa, checkpoint\n");
    if let Some(m) = train_manifest {
        writeln!(s, "train_manifest\t{}", m.display()).unwrap();
    }
    for m in bundle.members() {
        let name = checkpoint_name(m.info.seed, m.info.iteration);
        let path = dir.join(&name);
        if !path.exists() {
            model::save(&m.model, &path)?;
        }
        let kappa = m.info.val_kappa.map_or("none".to_string(), |k| k.to_string());
        writeln!(s, "member\t{}\t{}\t{kappa}\t{name}", m.info.seed, m.info.iteration).unwrap();
    }
    let out = dir.join(BUNDLE_FILE);
    fs::write(&out, s)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub bundle: EnsembleBundle,
    pub train_manifest: Option<PathBuf>,
}

/// Accepts the descriptor path or the run directory containing it.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<LoadedBundle> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(BUNDLE_FILE);
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&path)?;
    let mut members = Vec::new();
    let mut train_manifest = None;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::invalid(format!("{} line {}: {m}", path.display(), i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        match f[0] {
            "train_manifest" if f.len() == 2 => train_manifest = Some(PathBuf::from(f[1])),
            "member" if f.len() == 5 => {
                let seed = f[1].parse().map_err(|_| bad("bad seed"))?;
                let iteration = f[2].parse().map_err(|_| bad("bad iteration"))?;
                let val_kappa = match f[3] {
                    "none" => None,
                    k => Some(k.parse().map_err(|_| bad("bad kappa"))?),
                };
                let model = model::load::<f32>(dir.join(f[4]))?;
                members.push(EnsembleMember { info: MemberInfo { seed, iteration, val_kappa }, model });
            }
            _ => return Err(bad("unrecognized entry")),
        }
    }
    Ok(LoadedBundle { bundle: EnsembleBundle::new(members)?, train_manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SiameseConfig, SiameseModel};

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SiameseConfig::with_filters(2);
        cfg.input_side = 64;
        let members = [42u64, 21]
            .iter()
            .map(|&seed| EnsembleMember {
                info: MemberInfo { seed, iteration: 0, val_kappa: if seed == 21 { Some(0.5) } else { None } },
                model: SiameseModel::build(cfg.clone(), seed).unwrap(),
            })
            .collect();
        let bundle = EnsembleBundle::new(members).unwrap();
        let manifest = Path::new("/data/manifest.tsv");
        write_bundle(&bundle, dir.path(), Some(manifest)).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.train_manifest.as_deref(), Some(manifest));
        assert_eq!(loaded.bundle.len(), 2);
        for (a, b) in loaded.bundle.members().iter().zip(bundle.members()) {
            assert_eq!(a.info, b.info);
            assert_eq!(a.model, b.model);
        }
    }
}
