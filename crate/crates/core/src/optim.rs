//! Adam with L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::tensor::{ParamMap, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamMap<T>,
    pub v: ParamMap<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let c = &config;
        let ok = c.lr > 0.0
            && (0.0..1.0).contains(&c.beta1)
            && c.beta1 > 0.0
            && (0.0..1.0).contains(&c.beta2)
            && c.beta2 > 0.0
            && c.eps > 0.0
            && c.weight_decay >= 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid Adam configuration {config:?}")));
        }
        Ok(AdamState { config, step: 0, m: ParamMap::new(), v: ParamMap::new() })
    }

    /// One bias-corrected Adam update. Parameters for which `decayed`
    /// returns true get `weight_decay · θ` added to their gradient first.
    /// Every gradient is checked for non-finite values before any parameter
    /// is touched.
    pub fn step(
        &mut self,
        params: &mut ParamMap<T>,
        grads: &ParamMap<T>,
        decayed: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFiniteGradient { name: name.clone(), count: bad });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let wd = if decayed(name) { T::from_f64_lossy(c.weight_decay) } else { T::zero() };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + wd * *pi;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
