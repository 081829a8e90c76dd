use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

use super::loss::LossKind;
use crate::data::augment::AugmentConfig;
use crate::data::dataset::{assemble_batch, make_pair, PreparedSample};
use crate::data::geometry::PreprocessConfig;
use crate::data::sampler::{group_by_class, oversample_epoch, SamplerConfig};
use crate::error::{Error, Result};
use crate::metrics::{argmax, balanced_accuracy, classification_mse, quadratic_kappa, ConfusionMatrix};
use crate::model::{KneePatchPair, PairBatch, SiameseConfig, SiameseModel, NUM_CLASSES};
use crate::nn::Mode;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, stream};

// stream labels, mixed with the member seed
const SAMPLER_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub eval_every: u64,
    pub seeds: Vec<u64>,
    pub loss: LossKind,
    /// Apply on-the-fly augmentation to training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            weight_decay: 1e-4,
            dropout_p: 0.2,
            batch_size: 64,
            total_iterations: 50_000,
            eval_every: 500,
            seeds: vec![21, 42, 84],
            loss: LossKind::CrossEntropy,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            p.push(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            p.push(format!("train.dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.batch_size < 2 {
            p.push(format!("train.batch_size must be at least 2 for batch statistics, got {}", self.batch_size));
        }
        if self.eval_every == 0 {
            p.push("train.eval_every must be positive".to_string());
        } else if !self.total_iterations.is_multiple_of(self.eval_every) {
            p.push(format!(
                "train.eval_every={} does not divide train.total_iterations={}",
                self.eval_every, self.total_iterations
            ));
        }
        if self.seeds.is_empty() {
            p.push("train.seeds must not be empty".to_string());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            p.push(format!("train.seeds must be distinct, got {:?}", self.seeds));
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

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Inputs shared by all ensemble members.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [PreparedSample],
    pub val: &'a [PreparedSample],
    pub preprocess: &'a PreprocessConfig,
    pub augment: &'a AugmentConfig,
    pub sampler: &'a SamplerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValMetrics {
    pub kappa: f64,
    pub mse: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub iteration: u64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub val: ValMetrics,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub record: EvalRecord,
    /// Eval-mode copy of the model at this iteration.
    pub model: SiameseModel<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub seed: u64,
    /// Per-iteration training loss.
    pub losses: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub final_model: SiameseModel<f32>,
}

/// A member run stopped by a numeric failure; snapshots taken before the
/// failure are kept.
#[derive(Debug)]
pub struct TrainAbort {
    pub seed: u64,
    pub iteration: u64,
    pub cause: Error,
    pub history: TrainHistory,
}

/// Index of the snapshot with the highest κ, earliest on ties.
pub fn select_index(kappas: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &k) in kappas.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if k > kappas[b] || (kappas[b].is_nan() && !k.is_nan()) => best = Some(i),
            _ => {}
        }
    }
    best
}

pub fn select_snapshot(history: &[Snapshot]) -> Result<&Snapshot> {
    let kappas: Vec<f64> = history.iter().map(|s| s.record.val.kappa).collect();
    select_index(&kappas)
        .map(|i| &history[i])
        .ok_or_else(|| Error::Empty("cannot select a snapshot from an empty history".into()))
}

/// Validation pairs, batched once.
pub fn validation_batches(samples: &[PreparedSample], cfg: &PreprocessConfig) -> Result<Vec<(PairBatch<f32>, Vec<usize>)>> {
    let mut out = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let pairs: Vec<KneePatchPair<f32>> = chunk.iter().map(|s| make_pair(s, cfg, None)).collect::<Result<_>>()?;
        let refs: Vec<&KneePatchPair<f32>> = pairs.iter().collect();
        out.push((PairBatch::from_pairs(&refs)?, chunk.iter().map(PreparedSample::grade).collect()));
    }
    Ok(out)
}

pub fn evaluate_model(model: &SiameseModel<f32>, batches: &[(PairBatch<f32>, Vec<usize>)]) -> Result<ValMetrics> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (batch, targets) in batches {
        let logits = model.predict_logits(batch)?;
        for row in logits.data().chunks(model.config.num_classes) {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            pred.push(argmax(&row));
        }
        truth.extend_from_slice(targets);
    }
    let cm = ConfusionMatrix::from_grades(&truth, &pred)?;
    Ok(ValMetrics {
        kappa: quadratic_kappa(&truth, &pred)?.value,
        mse: classification_mse(&truth, &pred)?,
        balanced_accuracy: balanced_accuracy(&cm)?.value,
    })
}

/// Endless stream of training indices: oversampled epochs, each with its
/// own sampler stream, consumed in order.
struct EpochStream {
    groups: Vec<Vec<usize>>,
    sampler: SamplerConfig,
    seed: u64,
    epoch: u64,
    position: u64,
    queue: VecDeque<usize>,
}

impl EpochStream {
    fn new(samples: &[PreparedSample], sampler: &SamplerConfig, seed: u64) -> Result<Self> {
        let labels: Vec<usize> = samples.iter().map(PreparedSample::grade).collect();
        let groups = group_by_class(&labels, NUM_CLASSES);
        if let Some(class) = groups.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass { class });
        }
        Ok(EpochStream { groups, sampler: sampler.clone(), seed, epoch: 0, position: 0, queue: VecDeque::new() })
    }

    /// Next `n` indices with the (epoch, position) of the first one; a batch
    /// never spans two epochs' augmentation streams.
    fn next_batch(&mut self, n: usize) -> Result<(Vec<usize>, u64, u64)> {
        if self.queue.len() < n {
            self.epoch += 1;
            self.position = 0;
            let mut rng = stream(self.seed, &[SAMPLER_STREAM, self.epoch]);
            self.queue = oversample_epoch(&self.groups, &self.sampler, &mut rng)?.into();
            if self.queue.len() < n {
                return Err(Error::invalid(format!(
                    "epoch of {} samples is shorter than batch size {n}",
                    self.queue.len()
                )));
            }
        }
        let first = self.position;
        self.position += n as u64;
        Ok((self.queue.drain(..n).collect(), self.epoch, first))
    }
}

/// Trains one member from `SiameseModel::build(model_cfg, seed)`.
pub fn train_one(
    model_cfg: &SiameseConfig,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    pool: &ThreadPool,
    progress: Option<&(dyn Fn(u64, &EvalRecord) + Sync)>,
) -> std::result::Result<TrainHistory, TrainAbort> {
    let mut model_cfg = model_cfg.clone();
    model_cfg.dropout_p = cfg.dropout_p;
    let abort_early = |cause: Error| -> TrainAbort {
        let model = SiameseModel::build(SiameseConfig::default(), 0).expect("default config is valid");
        TrainAbort {
            seed,
            iteration: 0,
            cause,
            history: TrainHistory { seed, losses: Vec::new(), snapshots: Vec::new(), final_model: model },
        }
    };
    let setup = (|| -> Result<_> {
        cfg.validate()?;
        data.preprocess.validate()?;
        if model_cfg.input_side != data.preprocess.patch_side {
            return Err(Error::Config(vec![format!(
                "model input side {} differs from patch side {}",
                model_cfg.input_side, data.preprocess.patch_side
            )]));
        }
        let model = SiameseModel::<f32>::build(model_cfg.clone(), seed)?;
        let adam = AdamState::<f32>::new(cfg.adam())?;
        Ok((model, adam))
    })();
    let (mut model, mut adam) = match setup {
        Ok(v) => v,
        Err(e) => return Err(abort_early(e)),
    };
    let mut history = TrainHistory { seed, losses: Vec::new(), snapshots: Vec::new(), final_model: model.clone() };
    if cfg.total_iterations == 0 {
        history.final_model.set_mode(Mode::Eval);
        return Ok(history);
    }
    let prep = (|| -> Result<_> {
        Ok((validation_batches(data.val, data.preprocess)?, EpochStream::new(data.train, data.sampler, seed)?))
    })();
    let (val_batches, mut epochs) = match prep {
        Ok(v) => v,
        Err(e) => return Err(TrainAbort { seed, iteration: 0, cause: e, history }),
    };
    let mut dropout_rng: ChaCha8Rng = stream(seed, &[DROPOUT_STREAM]);
    let aug = cfg.augment.then_some(data.augment);
    model.set_mode(Mode::Train);
    let mut interval_loss = 0.0;
    for it in 1..=cfg.total_iterations {
        let step = (|| -> Result<f64> {
            let (idx, epoch, first) = epochs.next_batch(cfg.batch_size)?;
            let aug_seed = derive_seed(seed, &[AUGMENT_STREAM, epoch]);
            let (batch, targets) = assemble_batch(data.train, &idx, data.preprocess, aug, aug_seed, first, pool)?;
            let (logits, cache) = model.forward_train(&batch, &mut dropout_rng)?;
            let (loss, grad) = cfg.loss.evaluate(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: it as usize });
            }
            let grads = model.backward(&cache, &grad)?;
            adam.step(&mut model.params, &grads, SiameseModel::<f32>::is_decayed)?;
            Ok(loss as f64)
        })();
        let loss = match step {
            Ok(l) => l,
            Err(cause) => {
                history.final_model = model;
                return Err(TrainAbort { seed, iteration: it, cause, history });
            }
        };
        model.iteration = it;
        history.losses.push(loss);
        interval_loss += loss;
        if it % cfg.eval_every == 0 {
            let mut snap = model.clone();
            snap.set_mode(Mode::Eval);
            let val = match evaluate_model(&snap, &val_batches) {
                Ok(v) => v,
                Err(cause) => {
                    history.final_model = model;
                    return Err(TrainAbort { seed, iteration: it, cause, history });
                }
            };
            let record = EvalRecord { iteration: it, train_loss: interval_loss / cfg.eval_every as f64, val };
            interval_loss = 0.0;
            if let Some(f) = progress {
                f(seed, &record);
            }
            history.snapshots.push(Snapshot { record, model: snap });
        }
    }
    model.set_mode(Mode::Eval);
    history.final_model = model;
    Ok(history)
}

/// Per-iteration losses smoothed as medians of consecutive windows.
pub fn windowed_medians(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window)
        .map(|w| {
            let mut v = w.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        })
        .collect()
}
