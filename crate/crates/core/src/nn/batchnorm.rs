use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running per-channel statistics used by evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded in; `None` until statistics exist.
    pub tracked: Option<u64>,
}

impl<T: Real> RunningStats<T> {
    /// No statistics yet; evaluation mode rejects these.
    pub fn empty(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels], tracked: None }
    }

    /// Zero mean, unit variance, usable for evaluation immediately.
    pub fn standard(channels: usize) -> Self {
        RunningStats { tracked: Some(0), ..Self::empty(channels) }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Which statistics normalize the batch.
pub enum BnMode<'a, T> {
    /// Batch statistics; running statistics updated with momentum.
    Train(&'a mut RunningStats<T>),
    Eval(&'a RunningStats<T>),
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    shape: [usize; 4],
    train: bool,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

pub fn batchnorm2d_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode<'_, T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (b, c, h, w) = input.dims4()?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    let hw = h * w;
    let n = b * hw;
    let eps = T::from_f64_lossy(BN_EPS);
    let x = input.data();
    let (mean, inv_std, train) = match mode {
        BnMode::Train(running) => {
            if n < 2 {
                return Err(Error::shape(format!(
                    "batchnorm2d: train mode needs at least 2 values per channel, got {n}"
                )));
            }
            if running.channels() != c {
                return Err(Error::shape(format!(
                    "batchnorm2d: running statistics for {} channels, input has {c}",
                    running.channels()
                )));
            }
            let nf = T::from_usize(n).unwrap();
            let momentum = T::from_f64_lossy(BN_MOMENTUM);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().copied().sum::<T>();
                }
                let m = s / nf;
                let mut ss = T::zero();
                for bi in 0..b {
                    for &v in &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                        ss += (v - m) * (v - m);
                    }
                }
                mean[ci] = m;
                var[ci] = ss / nf;
            }
            let unbias = nf / (nf - T::one());
            for ci in 0..c {
                running.mean[ci] = (T::one() - momentum) * running.mean[ci] + momentum * mean[ci];
                running.var[ci] =
                    (T::one() - momentum) * running.var[ci] + momentum * var[ci] * unbias;
            }
            running.tracked = Some(running.tracked.unwrap_or(0) + 1);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv_std, true)
        }
        BnMode::Eval(running) => {
            if running.tracked.is_none() {
                return Err(Error::MissingRunningStats(format!("{c} channels")));
            }
            if running.channels() != c {
                return Err(Error::shape(format!(
                    "batchnorm2d: running statistics for {} channels, input has {c}",
                    running.channels()
                )));
            }
            let inv_std: Vec<T> = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (running.mean.clone(), inv_std, false)
        }
    };
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                out[i] = g[ci] * xh + bt[ci];
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BnCache { shape: [b, c, h, w], train, xhat, inv_std, gamma: g.to_vec() },
    ))
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm2d_backward<T: Real>(grad_out: &Tensor<T>, cache: &BnCache<T>) -> Result<BnGrads<T>> {
    if grad_out.shape() != cache.shape {
        return Err(Error::StaleCache(format!(
            "batchnorm2d backward: cotangent {:?} does not match forward output {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let [b, c, h, w] = cache.shape;
    let hw = h * w;
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for i in off..off + hw {
                dgamma[ci] += dy[i] * cache.xhat[i];
                dbeta[ci] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    let nf = T::from_usize(b * hw).unwrap();
    for ci in 0..c {
        let scale = cache.gamma[ci] * cache.inv_std[ci];
        for bi in 0..b {
            let off = (bi * c + ci) * hw;
            for i in off..off + hw {
                dx[i] = if cache.train {
                    scale * (dy[i] - (dbeta[ci] + cache.xhat[i] * dgamma[ci]) / nf)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(&cache.shape, dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}
