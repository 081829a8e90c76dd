//! Finite-difference verification of the hand-written backward passes.
//!
//! Every check runs in double precision: a random scalar objective
//! `Σ output ⊙ R` (or the loss itself for loss layers) is differentiated
//! analytically and by central differences with step [`FD_STEP`], and the
//! largest relative error per input/parameter is reported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{PairBatch, SiameseConfig, SiameseModel};
use crate::nn::{self, BnMode, RunningStats};
use crate::tensor::{ParamMap, Tensor};
use crate::train::combined_loss;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so exactly-zero gradients do
/// not turn round-off into large ratios.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Layer (or composed network) under test, with the shapes to draw.
#[derive(Debug, Clone)]
pub enum LayerSpec {
    Linear { batch: usize, inputs: usize, outputs: usize },
    Conv { batch: usize, channels: usize, filters: usize, kernel: usize, stride: usize, height: usize, width: usize },
    MaxPool { batch: usize, channels: usize, height: usize, width: usize },
    BatchNorm { batch: usize, channels: usize, height: usize, width: usize, train: bool },
    Relu { shape: Vec<usize> },
    GlobalAvgPool { batch: usize, channels: usize, height: usize, width: usize },
    Dropout { batch: usize, features: usize, p: f64 },
    Softmax { batch: usize, classes: usize },
    CrossEntropy { batch: usize, classes: usize },
    CombinedLoss { batch: usize },
    /// Whole Siamese network, cross-entropy loss, train mode.
    Network { config: SiameseConfig, batch: usize },
}

impl LayerSpec {
    pub fn name(&self) -> String {
        match self {
            LayerSpec::Linear { .. } => "linear".into(),
            LayerSpec::Conv { stride, .. } => format!("conv2d(stride {stride})"),
            LayerSpec::MaxPool { .. } => "maxpool2d".into(),
            LayerSpec::BatchNorm { train, .. } => {
                format!("batchnorm2d({})", if *train { "train" } else { "eval" })
            }
            LayerSpec::Relu { .. } => "relu".into(),
            LayerSpec::GlobalAvgPool { .. } => "global_avg_pool".into(),
            LayerSpec::Dropout { .. } => "dropout".into(),
            LayerSpec::Softmax { .. } => "softmax".into(),
            LayerSpec::CrossEntropy { .. } => "cross_entropy".into(),
            LayerSpec::CombinedLoss { .. } => "combined_loss".into(),
            LayerSpec::Network { config, .. } => {
                format!("siamese(N={}, S={}, shared={})", config.n_filters, config.input_side, config.shared)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub layer: String,
    pub tolerance: f64,
    /// (input or parameter name, max relative error over its elements)
    pub entries: Vec<(String, f64)>,
    /// Coordinates probed, and those left out because the probes
    /// straddled a ReLU or max-pool kink.
    pub checked: usize,
    pub skipped: usize,
    /// Set when the layer itself failed to run.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    /// Every entry within tolerance, and at most 5% of coordinates skipped.
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.entries.iter().all(|e| e.1 < self.tolerance) && self.skipped * 20 <= self.checked
    }
}

type Objective = Box<dyn Fn(&[Tensor<f64>]) -> crate::Result<f64>>;
type Analytic = Box<dyn Fn(&[Tensor<f64>]) -> crate::Result<Vec<Tensor<f64>>>>;
type Regime = Box<dyn Fn(&[Tensor<f64>]) -> crate::Result<u64>>;

struct Problem {
    names: Vec<String>,
    values: Vec<Tensor<f64>>,
    objective: Objective,
    analytic: Analytic,
    /// Piecewise-linear regime of the objective, when it has kinks that a
    /// random draw cannot keep away from.
    regime: Option<Regime>,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so ReLU kinks are not straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn build(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> crate::Result<Problem> {
    let seed: u64 = rng.random();
    Ok(match spec.clone() {
        LayerSpec::Linear { batch, inputs, outputs } => {
            let r = uniform(&[batch, outputs], rng);
            let r2 = r.clone();
            Problem {
                names: vec!["input".into(), "weight".into(), "bias".into()],
                values: vec![uniform(&[batch, inputs], rng), uniform(&[outputs, inputs], rng), uniform(&[outputs], rng)],
                objective: Box::new(move |v| Ok(dot(&nn::linear_forward(&v[0], &v[1], &v[2])?.0, &r))),
                regime: None,
                analytic: Box::new(move |v| {
                    let (_, c) = nn::linear_forward(&v[0], &v[1], &v[2])?;
                    let g = nn::linear_backward(&r2, &c)?;
                    Ok(vec![g.input, g.weight, g.bias])
                }),
            }
        }
        LayerSpec::Conv { batch, channels, filters, kernel, stride, height, width } => {
            let oh = (height - kernel) / stride + 1;
            let ow = (width - kernel) / stride + 1;
            let r = uniform(&[batch, filters, oh, ow], rng);
            let r2 = r.clone();
            Problem {
                names: vec!["input".into(), "kernels".into(), "bias".into()],
                values: vec![
                    uniform(&[batch, channels, height, width], rng),
                    uniform(&[filters, channels, kernel, kernel], rng),
                    uniform(&[filters], rng),
                ],
                objective: Box::new(move |v| Ok(dot(&nn::conv2d_forward(&v[0], &v[1], &v[2], stride)?.0, &r))),
                regime: None,
                analytic: Box::new(move |v| {
                    let (_, c) = nn::conv2d_forward(&v[0], &v[1], &v[2], stride)?;
                    let g = nn::conv2d_backward(&r2, &c)?;
                    Ok(vec![g.input, g.kernels, g.bias])
                }),
            }
        }
        LayerSpec::MaxPool { batch, channels, height, width } => {
            let r = uniform(&[batch, channels, height / 2, width / 2], rng);
            let r2 = r.clone();
            Problem {
                names: vec!["input".into()],
                values: vec![uniform(&[batch, channels, height, width], rng)],
                objective: Box::new(move |v| Ok(dot(&nn::maxpool2d_forward(&v[0])?.0, &r))),
                regime: None,
                analytic: Box::new(move |v| {
                    let (_, c) = nn::maxpool2d_forward(&v[0])?;
                    Ok(vec![nn::maxpool2d_backward(&r2, &c)?])
                }),
            }
        }
        LayerSpec::BatchNorm { batch, channels, height, width, train } => {
            let r = uniform(&[batch, channels, height, width], rng);
            let r2 = r.clone();
            let running = RunningStats {
                mean: (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect(),
                var: (0..channels).map(|_| rng.random_range(0.5..2.0)).collect(),
                tracked: Some(1),
            };
            let rs2 = running.clone();
            let fwd = move |v: &[Tensor<f64>], rs: &RunningStats<f64>| {
                let mut local = rs.clone();
                let mode = if train { BnMode::Train(&mut local) } else { BnMode::Eval(rs) };
                nn::batchnorm2d_forward(&v[0], &v[1], &v[2], mode)
            };
            Problem {
                names: vec!["input".into(), "gamma".into(), "beta".into()],
                values: vec![
                    uniform(&[batch, channels, height, width], rng).scale(2.0),
                    uniform(&[channels], rng),
                    uniform(&[channels], rng),
                ],
                objective: Box::new(move |v| Ok(dot(&fwd(v, &running)?.0, &r))),
                regime: None,
                analytic: Box::new(move |v| {
                    let (_, c) = fwd(v, &rs2)?;
                    let g = nn::batchnorm2d_backward(&r2, &c)?;
                    Ok(vec![g.input, g.gamma, g.beta])
                }),
            }
        }
        LayerSpec::Relu { shape } => {
            let r = uniform(&shape, rng);
            let r2 = r.clone();
            Problem {
                names: vec!["input".into()],
                values: vec![away_from_zero(&shape, rng)],
                objective: Box::new(move |v| Ok(dot(&nn::relu_forward(&v[0]), &r))),
                regime: None,
                analytic: Box::new(move |v| Ok(vec![nn::relu_backward(&r2, &nn::relu_forward(&v[0]))?])),
            }
        }
        LayerSpec::GlobalAvgPool { batch, channels, height, width } => {
            let r = uniform(&[batch, channels], rng);
            let r2 = r.clone();
            Problem {
                names: vec!["input".into()],
                values: vec![uniform(&[batch, channels, height, width], rng)],
                objective: Box::new(move |v| Ok(dot(&nn::global_avg_pool_forward(&v[0])?, &r))),
                regime: None,
                analytic: Box::new(move |v| Ok(vec![nn::global_avg_pool_backward(&r2, v[0].shape())?])),
            }
        }
        LayerSpec::Dropout { batch, features, p } => {
            let r = uniform(&[batch, features], rng);
            let r2 = r.clone();
            let fwd = move |x: &Tensor<f64>| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                nn::dropout_forward(x, p, Some(&mut rng))
            };
            Problem {
                names: vec!["input".into()],
                values: vec![uniform(&[batch, features], rng)],
                objective: Box::new(move |v| Ok(dot(&fwd(&v[0])?.0, &r))),
                regime: None,
                analytic: Box::new(move |v| {
                    let (_, c) = fwd(&v[0])?;
                    Ok(vec![nn::dropout_backward(&r2, &c)?])
                }),
            }
        }
        LayerSpec::Softmax { batch, classes } => {
            let r = uniform(&[batch, classes], rng);
            let r2 = r.clone();
            Problem {
                names: vec!["logits".into()],
                values: vec![uniform(&[batch, classes], rng).scale(3.0)],
                objective: Box::new(move |v| Ok(dot(&nn::softmax(&v[0])?, &r))),
                regime: None,
                analytic: Box::new(move |v| Ok(vec![nn::softmax_backward(&r2, &nn::softmax(&v[0])?)?])),
            }
        }
        LayerSpec::CrossEntropy { batch, classes } => {
            let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
            let t2 = targets.clone();
            Problem {
                names: vec!["logits".into()],
                values: vec![uniform(&[batch, classes], rng).scale(3.0)],
                objective: Box::new(move |v| Ok(nn::cross_entropy(&v[0], &targets)?.0)),
                regime: None,
                analytic: Box::new(move |v| Ok(vec![nn::cross_entropy(&v[0], &t2)?.1])),
            }
        }
        LayerSpec::CombinedLoss { batch } => {
            let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..5)).collect();
            let t2 = targets.clone();
            Problem {
                names: vec!["logits".into()],
                values: vec![uniform(&[batch, 5], rng).scale(3.0)],
                objective: Box::new(move |v| Ok(combined_loss(&v[0], &targets)?.0)),
                regime: None,
                analytic: Box::new(move |v| Ok(vec![combined_loss(&v[0], &t2)?.1])),
            }
        }
        LayerSpec::Network { config, batch } => network_problem(config, batch, seed, rng)?,
    })
}

fn network_problem(config: SiameseConfig, batch: usize, seed: u64, rng: &mut ChaCha8Rng) -> crate::Result<Problem> {
    let base = SiameseModel::<f64>::build(config.clone(), seed)?;
    let s = config.input_side;
    let input = PairBatch {
        lateral: Tensor::from_fn(&[batch, 1, s, s], |_| rng.random()),
        medial: Tensor::from_fn(&[batch, 1, s, s], |_| rng.random()),
    };
    let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..config.num_classes)).collect();
    // perturb the weights away from the symmetric initial state
    let mut base = base;
    for (name, t) in base.params.iter_mut() {
        if !name.ends_with(".weight") {
            *t = uniform(t.shape(), rng).scale(0.5).zip_map(t, |a, b| a + b)?;
        }
    }
    let names: Vec<String> = base.params.keys().cloned().collect();
    let values: Vec<Tensor<f64>> = base.params.values().cloned().collect();
    let dropout_seed: u64 = rng.random();
    let run = move |v: &[Tensor<f64>], want_grads: bool| -> crate::Result<(f64, u64, Option<ParamMap<f64>>)> {
        let mut model = base.clone();
        for (name, t) in model.params.values_mut().zip(v) {
            *name = t.clone();
        }
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (logits, cache) = model.forward_train(&input, &mut drng)?;
        let (loss, grad) = nn::cross_entropy(&logits, &targets)?;
        let grads = if want_grads { Some(model.backward(&cache, &grad)?) } else { None };
        Ok((loss, cache.regime_fingerprint(), grads))
    };
    let run = std::rc::Rc::new(run);
    let r1 = run.clone();
    let r2 = run.clone();
    let names2 = names.clone();
    Ok(Problem {
        names,
        values,
        objective: Box::new(move |v| Ok(r1(v, false)?.0)),
        regime: Some(Box::new(move |v| Ok(r2(v, false)?.1))),
        analytic: Box::new(move |v| {
            let grads = run(v, true)?.2.expect("requested");
            Ok(names2.iter().map(|n| grads[n].clone()).collect())
        }),
    })
}

/// Per-entry worst relative error, plus the (checked, skipped) coordinate
/// counts. A coordinate is skipped when the two probes straddle a kink.
fn evaluate(problem: &Problem) -> crate::Result<(Vec<(String, f64)>, usize, usize)> {
    let analytic = (problem.analytic)(&problem.values)?;
    let mut values = problem.values.clone();
    let mut out = Vec::with_capacity(values.len());
    let (mut checked, mut skipped) = (0, 0);
    for (i, name) in problem.names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..values[i].len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_STEP;
            let plus = (problem.objective)(&values)?;
            let regime_plus = problem.regime.as_ref().map(|r| r(&values)).transpose()?;
            values[i].data_mut()[j] = orig - FD_STEP;
            let minus = (problem.objective)(&values)?;
            let regime_minus = problem.regime.as_ref().map(|r| r(&values)).transpose()?;
            values[i].data_mut()[j] = orig;
            checked += 1;
            if regime_plus != regime_minus {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
        out.push((name.clone(), worst));
    }
    Ok((out, checked, skipped))
}

/// Compare analytic and central-difference gradients for one layer on
/// random tensors drawn from `seed`. Failures are reported, never thrown.
pub fn grad_check(spec: &LayerSpec, tolerance: f64, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = build(spec, &mut rng).and_then(|p| evaluate(&p));
    let (entries, checked, skipped, error) = match result {
        Ok((e, c, s)) => (e, c, s, None),
        Err(e) => (Vec::new(), 0, 0, Some(e.to_string())),
    };
    GradCheckReport { layer: spec.name(), tolerance, entries, checked, skipped, error }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_tight() {
        let r = grad_check(&LayerSpec::Linear { batch: 3, inputs: 4, outputs: 5 }, 1e-6, 1);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn conv_stride_two() {
        let spec = LayerSpec::Conv { batch: 2, channels: 2, filters: 3, kernel: 3, stride: 2, height: 7, width: 8 };
        let r = grad_check(&spec, 1e-4, 2);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn batchnorm_both_modes() {
        for train in [true, false] {
            let spec = LayerSpec::BatchNorm { batch: 3, channels: 2, height: 3, width: 2, train };
            let r = grad_check(&spec, 1e-4, 3);
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn softmax_and_losses() {
        for spec in [
            LayerSpec::Softmax { batch: 4, classes: 5 },
            LayerSpec::CrossEntropy { batch: 4, classes: 5 },
            LayerSpec::CombinedLoss { batch: 4 },
        ] {
            let r = grad_check(&spec, 1e-4, 4);
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn whole_network_two_sample_batch() {
        for shared in [true, false] {
            let mut config = SiameseConfig::with_filters(2);
            config.input_side = 64;
            config.shared = shared;
            let r = grad_check(&LayerSpec::Network { config, batch: 2 }, 1e-3, 6);
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn broken_layer_is_reported_not_thrown() {
        let spec = LayerSpec::MaxPool { batch: 1, channels: 1, height: 1, width: 1 };
        let r = grad_check(&spec, 1e-4, 5);
        assert!(!r.passed());
        assert!(r.error.is_some());
    }
}
