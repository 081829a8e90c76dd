//! The two-branch Siamese grading network.
//!
//! Each branch is five unpadded 3×3 Conv-BN-ReLU blocks (optionally followed
//! by 2×2 max-pooling) and a global average pool. The lateral patch and the
//! flipped medial patch run through the branch (one shared parameter set, or
//! two sets for the ablation), the pooled features are concatenated as
//! `[lateral, medial]`, passed through dropout and a final linear layer
//! producing one logit per KL grade.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load, load_bytes, save, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    SiameseConfig, CONV_LAYERS, KERNEL_SIZE, NUM_CLASSES, REFERENCE_FINAL_MAP, REFERENCE_SIDE,
};

use crate::error::{Error, Result};
use crate::nn::{
    batchnorm2d_backward, batchnorm2d_forward, conv2d_backward, conv2d_backward_params,
    conv2d_forward, dropout_backward, dropout_forward, global_avg_pool_backward,
    global_avg_pool_forward, linear_backward, linear_forward, maxpool2d_backward,
    maxpool2d_forward, relu_backward, relu_forward, BnCache, BnMode, ConvCache, DropoutCache,
    LinearCache, Mode, PoolCache, RunningStats,
};
use crate::tensor::{ParamMap, Real, Tensor};

/// Branch index: 0 = lateral, 1 = medial.
pub const LATERAL: usize = 0;
pub const MEDIAL: usize = 1;

/// Where a patch pair came from: source image id and the two crop
/// rectangles `(x, y, width, height)` on the preprocessed image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub image_id: String,
    pub lateral_rect: (usize, usize, usize, usize),
    pub medial_rect: (usize, usize, usize, usize),
}

/// Model input: the lateral patch and the horizontally flipped medial
/// patch, each 1×S×S with intensities scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct KneePatchPair<T = f32> {
    pub lateral: Tensor<T>,
    pub medial_flipped: Tensor<T>,
    pub provenance: Provenance,
}

impl<T: Real> KneePatchPair<T> {
    pub fn side(&self) -> usize {
        self.lateral.shape().last().copied().unwrap_or(0)
    }

    pub fn cast<U: Real>(&self) -> KneePatchPair<U> {
        KneePatchPair {
            lateral: self.lateral.cast(),
            medial_flipped: self.medial_flipped.cast(),
            provenance: self.provenance.clone(),
        }
    }
}

/// A batch of pairs as two B×1×S×S tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<T> {
    pub lateral: Tensor<T>,
    pub medial: Tensor<T>,
}

impl<T: Real> PairBatch<T> {
    pub fn from_pairs(pairs: &[&KneePatchPair<T>]) -> Result<Self> {
        let lat: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.lateral).collect();
        let med: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.medial_flipped).collect();
        Ok(PairBatch { lateral: Tensor::stack(&lat)?, medial: Tensor::stack(&med)? })
    }

    pub fn len(&self) -> usize {
        self.lateral.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn branch(&self, i: usize) -> &Tensor<T> {
        if i == LATERAL {
            &self.lateral
        } else {
            &self.medial
        }
    }
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
    relu_out: Tensor<T>,
    pool: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct BranchCache<T> {
    stages: Vec<StageCache<T>>,
}

impl<T> BranchCache<T> {
    fn final_activation(&self) -> &Tensor<T> {
        &self.stages.last().expect("five stages").relu_out
    }
}

/// State saved by [`SiameseModel::forward`] for the matching backward.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    shared: bool,
    branches: Vec<BranchCache<T>>,
    features: Vec<Tensor<T>>,
    dropout: DropoutCache<T>,
    linear: LinearCache<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Final Conv-BN-ReLU activations of a branch, B×F×X×Y.
    pub fn branch_activation(&self, branch: usize) -> &Tensor<T> {
        self.branches[branch].final_activation()
    }

    /// Fingerprint of the piecewise-linear regime: which ReLUs are active
    /// and where each max-pool window routes. Two inputs with equal
    /// fingerprints lie on the same linear piece of the network.
    pub fn regime_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for branch in &self.branches {
            for stage in &branch.stages {
                for v in stage.relu_out.data() {
                    (*v > T::zero()).hash(&mut h);
                }
                if let Some(p) = &stage.pool {
                    p.argmax().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Pooled per-branch feature vectors, B×F, before concatenation.
    pub fn branch_features(&self, branch: usize) -> &Tensor<T> {
        &self.features[branch]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel<T = f32> {
    pub config: SiameseConfig,
    pub params: ParamMap<T>,
    pub bn_state: BTreeMap<String, RunningStats<T>>,
    pub mode: Mode,
    /// Training iterations applied to these parameters.
    pub iteration: u64,
}

impl<T: Real> SiameseModel<T> {
    /// Fresh model: Kaiming fan-in normal weights, zero biases, unit gamma,
    /// zero beta. Weights are drawn in f64 in parameter-name order, so equal
    /// seeds give equal values in every precision.
    pub fn build(config: SiameseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes: BTreeMap<String, Vec<usize>> = config.parameter_shapes().into_iter().collect();
        let mut params = ParamMap::new();
        for (name, shape) in shapes {
            let t = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, T::one())
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        let bn_state =
            config.bn_layers().into_iter().map(|(n, c)| (n, RunningStats::standard(c))).collect();
        Ok(SiameseModel { config, params, bn_state, mode: Mode::Train, iteration: 0 })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Convolution and batch-norm parameters (everything but the classifier).
    pub fn conv_bn_parameter_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| !n.starts_with("fc.")).map(|(_, t)| t.len()).sum()
    }

    /// Convolution and linear weights take weight decay; biases and batch-norm
    /// affine parameters do not.
    pub fn is_decayed(name: &str) -> bool {
        name.ends_with(".weight")
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_batch(&self, batch: &PairBatch<T>) -> Result<()> {
        let s = self.config.input_side;
        let b = batch.lateral.shape().first().copied().unwrap_or(0);
        for (name, t) in [("lateral", &batch.lateral), ("medial", &batch.medial)] {
            if t.shape() != [b, 1, s, s] {
                return Err(Error::shape(format!(
                    "{name} patches have shape {:?}, model expects B×1×{s}×{s}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn branch_forward(
        &self,
        prefix: &str,
        input: &Tensor<T>,
        mut running: Option<&mut BTreeMap<String, RunningStats<T>>>,
    ) -> Result<BranchCache<T>> {
        let mut stages = Vec::with_capacity(CONV_LAYERS);
        let mut x = input.clone();
        for layer in 0..CONV_LAYERS {
            let i = layer + 1;
            let (y, conv) = conv2d_forward(
                &x,
                self.param(&format!("{prefix}.conv{i}.weight"))?,
                self.param(&format!("{prefix}.conv{i}.bias"))?,
                self.config.strides[layer],
            )?;
            let bn_name = format!("{prefix}.bn{i}");
            let gamma = self.param(&format!("{bn_name}.gamma"))?;
            let beta = self.param(&format!("{bn_name}.beta"))?;
            let missing = || Error::invalid(format!("no running statistics for `{bn_name}`"));
            let (y, bn) = match running.as_deref_mut() {
                Some(states) => {
                    let rs = states.get_mut(&bn_name).ok_or_else(missing)?;
                    batchnorm2d_forward(&y, gamma, beta, BnMode::Train(rs))?
                }
                None => {
                    let rs = self.bn_state.get(&bn_name).ok_or_else(missing)?;
                    batchnorm2d_forward(&y, gamma, beta, BnMode::Eval(rs))?
                }
            };
            let relu_out = relu_forward(&y);
            let (next, pool) = if self.config.pool_after[layer] {
                let (p, cache) = maxpool2d_forward(&relu_out)?;
                (p, Some(cache))
            } else {
                (relu_out.clone(), None)
            };
            stages.push(StageCache { conv, bn, relu_out, pool });
            x = next;
        }
        Ok(BranchCache { stages })
    }

    fn head_forward<R: Rng + ?Sized>(
        &self,
        branches: Vec<BranchCache<T>>,
        batch: usize,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let features = branches
            .iter()
            .map(|b| global_avg_pool_forward(b.final_activation()))
            .collect::<Result<Vec<_>>>()?;
        let f = self.config.branch_features();
        let mut concat = Vec::with_capacity(batch * 2 * f);
        for bi in 0..batch {
            concat.extend_from_slice(features[LATERAL].slab(bi));
            concat.extend_from_slice(features[MEDIAL].slab(bi));
        }
        let concat = Tensor::new(&[batch, 2 * f], concat)?;
        let (dropped, dropout) = dropout_forward(&concat, self.config.dropout_p, dropout_rng)?;
        let (logits, linear) =
            linear_forward(&dropped, self.param("fc.weight")?, self.param("fc.bias")?)?;
        Ok((
            logits,
            ForwardCache { batch, shared: self.config.shared, branches, features, dropout, linear },
        ))
    }

    /// Forward pass in the model's current mode. Train mode normalizes with
    /// batch statistics, updates the running statistics (once per branch
    /// application) and draws the dropout mask from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        batch: &PairBatch<T>,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        match self.mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train => self.forward_train(batch, rng),
        }
    }

    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        batch: &PairBatch<T>,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_batch(batch)?;
        let prefixes = self.config.branch_prefixes();
        let mut running = std::mem::take(&mut self.bn_state);
        let result = (0..2)
            .map(|i| self.branch_forward(prefixes[i], batch.branch(i), Some(&mut running)))
            .collect::<Result<Vec<_>>>();
        self.bn_state = running;
        self.head_forward(result?, batch.len(), Some(rng))
    }

    /// Eval-mode forward; read-only, so it may run concurrently on a shared model.
    pub fn forward_eval(&self, batch: &PairBatch<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_batch(batch)?;
        let prefixes = self.config.branch_prefixes();
        let branches = (0..2)
            .map(|i| self.branch_forward(prefixes[i], batch.branch(i), None))
            .collect::<Result<Vec<_>>>()?;
        self.head_forward::<ChaCha8Rng>(branches, batch.len(), None)
    }

    /// Logits only, eval mode.
    pub fn predict_logits(&self, batch: &PairBatch<T>) -> Result<Tensor<T>> {
        Ok(self.forward_eval(batch)?.0)
    }

    fn check_cache(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<()> {
        if cache.shared != self.config.shared || cache.branches.len() != 2 {
            return Err(Error::StaleCache("forward cache belongs to a different model".into()));
        }
        if grad_logits.shape() != [cache.batch, self.config.num_classes] {
            return Err(Error::StaleCache(format!(
                "logit cotangent {:?} does not match forward batch {}×{}",
                grad_logits.shape(),
                cache.batch,
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Cotangents of the two pooled branch feature vectors (B×F each), plus
    /// the classifier gradients.
    fn head_backward(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<([Tensor<T>; 2], Tensor<T>, Tensor<T>)> {
        self.check_cache(cache, grad_logits)?;
        let lin = linear_backward(grad_logits, &cache.linear)?;
        let g = dropout_backward(&lin.input, &cache.dropout)?;
        let f = self.config.branch_features();
        let b = cache.batch;
        let mut lat = Vec::with_capacity(b * f);
        let mut med = Vec::with_capacity(b * f);
        for row in g.data().chunks(2 * f) {
            lat.extend_from_slice(&row[..f]);
            med.extend_from_slice(&row[f..]);
        }
        Ok((
            [Tensor::new(&[b, f], lat)?, Tensor::new(&[b, f], med)?],
            lin.weight,
            lin.bias,
        ))
    }

    /// Gradient of the logits' cotangent with respect to each branch's
    /// pooled features (the post-GAP nodes), B×F per branch.
    pub fn feature_gradients(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<[Tensor<T>; 2]> {
        Ok(self.head_backward(cache, grad_logits)?.0)
    }

    /// Parameter gradients for a logit cotangent. Shared parameters receive
    /// the sum of both branches' contributions.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<ParamMap<T>> {
        let (feat_grads, gw, gb) = self.head_backward(cache, grad_logits)?;
        let mut grads = ParamMap::new();
        grads.insert("fc.weight".to_string(), gw);
        grads.insert("fc.bias".to_string(), gb);
        let prefixes = self.config.branch_prefixes();
        for (i, gfeat) in feat_grads.iter().enumerate() {
            let branch = &cache.branches[i];
            let mut g = global_avg_pool_backward(gfeat, branch.final_activation().shape())?;
            for layer in (0..CONV_LAYERS).rev() {
                let stage = &branch.stages[layer];
                let id = layer + 1;
                if let Some(pool) = &stage.pool {
                    g = maxpool2d_backward(&g, pool)?;
                }
                g = relu_backward(&g, &stage.relu_out)?;
                let bn = batchnorm2d_backward(&g, &stage.bn)?;
                accumulate(&mut grads, format!("{}.bn{id}.gamma", prefixes[i]), bn.gamma)?;
                accumulate(&mut grads, format!("{}.bn{id}.beta", prefixes[i]), bn.beta)?;
                let (gk, gbias) = if layer == 0 {
                    conv2d_backward_params(&bn.input, &stage.conv)?
                } else {
                    let cg = conv2d_backward(&bn.input, &stage.conv)?;
                    g = cg.input;
                    (cg.kernels, cg.bias)
                };
                accumulate(&mut grads, format!("{}.conv{id}.weight", prefixes[i]), gk)?;
                accumulate(&mut grads, format!("{}.conv{id}.bias", prefixes[i]), gbias)?;
            }
        }
        Ok(grads)
    }
}

fn accumulate<T: Real>(grads: &mut ParamMap<T>, name: String, g: Tensor<T>) -> Result<()> {
    match grads.get_mut(&name) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(name, g);
            Ok(())
        }
    }
}
