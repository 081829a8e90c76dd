use std::cmp::Ordering;

use rayon::ThreadPool;

use super::trainer::{select_snapshot, train_one, EvalRecord, TrainAbort, TrainConfig, TrainData, TrainHistory};
use crate::data::dataset::{make_pair, thread_pool, PreparedSample};
use crate::data::geometry::PreprocessConfig;
use crate::metrics::Prediction;
use crate::error::{Error, Result};
use crate::model::{KneePatchPair, PairBatch, SiameseConfig, SiameseModel};
use crate::nn::Mode;

const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct MemberInfo {
    pub seed: u64,
    pub iteration: u64,
    /// `None` for members taken before any validation ran.
    pub val_kappa: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub info: MemberInfo,
    pub model: SiameseModel<f32>,
}

/// Members are kept sorted by (seed, iteration) and in eval mode.
#[derive(Debug, Clone)]
pub struct EnsembleBundle {
    members: Vec<EnsembleMember>,
}

impl EnsembleBundle {
    pub fn new(mut members: Vec<EnsembleMember>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Empty("ensemble bundle has no members".into()))?;
        let k = first.model.config.num_classes;
        let side = first.model.config.input_side;
        if let Some(m) = members.iter().find(|m| m.model.config.num_classes != k || m.model.config.input_side != side) {
            return Err(Error::invalid(format!(
                "member seed {} has {} classes and input side {}, expected {k} and {side}",
                m.info.seed, m.model.config.num_classes, m.model.config.input_side
            )));
        }
        for m in &mut members {
            m.model.set_mode(Mode::Eval);
        }
        members.sort_by_key(|m| (m.info.seed, m.info.iteration));
        Ok(EnsembleBundle { members })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].model.config.num_classes
    }

    pub fn input_side(&self) -> usize {
        self.members[0].model.config.input_side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    pub p: Vec<f64>,
}

impl ProbabilityVector {
    pub fn argmax(&self) -> usize {
        crate::metrics::argmax(&self.p)
    }
}

fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn cmp_logits(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Sums member logits in a canonical order (by seed, then by value) and
/// applies one softmax, so the result does not depend on member order.
pub fn fuse_logits(members: &[(u64, Vec<f64>)]) -> Result<ProbabilityVector> {
    let k = members.first().ok_or_else(|| Error::Empty("no member logits to fuse".into()))?.1.len();
    if k == 0 || members.iter().any(|(_, l)| l.len() != k) {
        return Err(Error::shape("member logit vectors differ in length"));
    }
    if members.iter().any(|(_, l)| l.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("non-finite member logit"));
    }
    let mut order: Vec<&(u64, Vec<f64>)> = members.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| cmp_logits(&a.1, &b.1)));
    let mut sum = vec![0.0; k];
    for (_, l) in order {
        for (s, &v) in sum.iter_mut().zip(l) {
            *s += v;
        }
    }
    Ok(ProbabilityVector { p: softmax_f64(&sum) })
}

/// Fused probabilities for every pair of a batch.
pub fn ensemble_predict_batch(bundle: &EnsembleBundle, batch: &PairBatch<f32>) -> Result<Vec<ProbabilityVector>> {
    let k = bundle.num_classes();
    let per_member: Vec<(u64, Vec<f64>)> = bundle
        .members
        .iter()
        .map(|m| Ok((m.info.seed, m.model.predict_logits(batch)?.data().iter().map(|&v| v as f64).collect())))
        .collect::<Result<_>>()?;
    (0..batch.len())
        .map(|b| {
            let rows: Vec<(u64, Vec<f64>)> =
                per_member.iter().map(|(s, l)| (*s, l[b * k..(b + 1) * k].to_vec())).collect();
            fuse_logits(&rows)
        })
        .collect()
}

/// Fused predictions for prepared samples, in input order, without
/// augmentation.
pub fn predict_samples(bundle: &EnsembleBundle, samples: &[PreparedSample], cfg: &PreprocessConfig) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let pairs = chunk.iter().map(|s| make_pair(s, cfg, None)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&KneePatchPair<f32>> = pairs.iter().collect();
        let probs = ensemble_predict_batch(bundle, &PairBatch::from_pairs(&refs)?)?;
        out.extend(chunk.iter().zip(probs).map(|(s, p)| Prediction { id: s.id.clone(), grade: s.grade(), probs: p.p }));
    }
    Ok(out)
}

pub fn ensemble_predict(bundle: &EnsembleBundle, pair: &KneePatchPair<f32>) -> Result<ProbabilityVector> {
    let batch = PairBatch::from_pairs(&[pair])?;
    Ok(ensemble_predict_batch(bundle, &batch)?.remove(0))
}

#[derive(Debug)]
pub struct EnsembleRun {
    pub bundle: EnsembleBundle,
    /// In seed order of the config.
    pub histories: Vec<TrainHistory>,
}

#[derive(Debug)]
pub struct EnsembleFailure {
    pub failures: Vec<TrainAbort>,
    pub survivors: Vec<TrainHistory>,
}

impl std::error::Error for EnsembleFailure {}

impl EnsembleFailure {
    /// True when some member stopped on a non-finite loss or gradient.
    pub fn is_numeric(&self) -> bool {
        self.failures.iter().any(|a| matches!(a.cause, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. }))
    }
}

impl std::fmt::Display for EnsembleFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for a in &self.failures {
            writeln!(f, "member seed {} aborted at iteration {}: {}", a.seed, a.iteration, a.cause)?;
        }
        write!(f, "surviving members: {:?}", self.survivors.iter().map(|h| h.seed).collect::<Vec<_>>())
    }
}

/// The selected snapshot of a history, or the initial model when training
/// had no evaluation points.
pub fn selected_member(history: &TrainHistory) -> EnsembleMember {
    match select_snapshot(&history.snapshots) {
        Ok(s) => EnsembleMember {
            info: MemberInfo { seed: history.seed, iteration: s.record.iteration, val_kappa: Some(s.record.val.kappa) },
            model: s.model.clone(),
        },
        Err(_) => EnsembleMember {
            info: MemberInfo { seed: history.seed, iteration: history.final_model.iteration, val_kappa: None },
            model: history.final_model.clone(),
        },
    }
}

/// Trains one member per seed, up to `threads` members at a time, and
/// bundles each member's best snapshot. Results do not depend on `threads`.
pub fn run_ensemble_training(
    model_cfg: &SiameseConfig,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    threads: usize,
    progress: Option<&(dyn Fn(u64, &EvalRecord) + Sync)>,
) -> std::result::Result<EnsembleRun, EnsembleFailure> {
    let threads = threads.max(1);
    let concurrent = threads.min(cfg.seeds.len()).max(1);
    let per_member = (threads / concurrent).max(1);
    let fail = |e: Error| EnsembleFailure {
        failures: vec![TrainAbort {
            seed: cfg.seeds.first().copied().unwrap_or(0),
            iteration: 0,
            cause: e,
            history: TrainHistory {
                seed: 0,
                losses: Vec::new(),
                snapshots: Vec::new(),
                final_model: SiameseModel::build(SiameseConfig::default(), 0).expect("default config is valid"),
            },
        }],
        survivors: Vec::new(),
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e));
    }
    let pools: Vec<ThreadPool> = match (0..concurrent).map(|_| thread_pool(per_member)).collect::<Result<_>>() {
        Ok(p) => p,
        Err(e) => return Err(fail(e)),
    };
    let mut results: Vec<Option<std::result::Result<TrainHistory, TrainAbort>>> =
        (0..cfg.seeds.len()).map(|_| None).collect();
    for (wave_seeds, wave_slots) in cfg.seeds.chunks(concurrent).zip(results.chunks_mut(concurrent)) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = wave_seeds
                .iter()
                .zip(&pools)
                .map(|(&seed, pool)| scope.spawn(move || train_one(model_cfg, data, cfg, seed, pool, progress)))
                .collect();
            for (slot, h) in wave_slots.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("member thread panicked"));
            }
        });
    }
    let mut histories = Vec::new();
    let mut failures = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(h) => histories.push(h),
            Err(a) => failures.push(a),
        }
    }
    if !failures.is_empty() {
        return Err(EnsembleFailure { failures, survivors: histories });
    }
    let members = histories.iter().map(selected_member).collect();
    match EnsembleBundle::new(members) {
        Ok(bundle) => Ok(EnsembleRun { bundle, histories }),
        Err(e) => Err(fail(e)),
    }
}
