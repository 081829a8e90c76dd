//! Element-wise and dense layers: ReLU, global average pooling, linear,
//! dropout and row softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

fn check_cotangent<T: Real>(grad_out: &Tensor<T>, shape: &[usize], layer: &str) -> Result<()> {
    if grad_out.shape() != shape {
        return Err(Error::StaleCache(format!(
            "{layer} backward: cotangent {:?} does not match forward output {shape:?}",
            grad_out.shape()
        )));
    }
    Ok(())
}

/// ReLU; the cache is the forward output itself.
pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    check_cotangent(grad_out, output.shape(), "relu")?;
    grad_out.zip_map(output, |g, y| if y > T::zero() { g } else { T::zero() })
}

/// Mean over H×W: B×C×H×W → B×C.
pub fn global_avg_pool_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = input.data().chunks(hw).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[b, c], data)
}

pub fn global_avg_pool_backward<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let &[b, c, h, w] = input_shape else {
        return Err(Error::shape(format!("global_avg_pool: bad input shape {input_shape:?}")));
    };
    check_cotangent(grad_out, &[b, c], "global_avg_pool")?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut data = Vec::with_capacity(b * c * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape, data)
}

#[derive(Debug, Clone)]
pub struct LinearCache<T> {
    input: Tensor<T>,
    weight: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `y = x Wᵀ + b` with `x` B×in, `W` out×in, `b` out.
pub fn linear_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LinearCache<T>)> {
    let (b, fin) = input.dims2()?;
    let (fout, win) = weight.dims2()?;
    if win != fin {
        return Err(Error::shape(format!(
            "linear: input has {fin} features, weight expects {win}"
        )));
    }
    bias.expect_shape(&[fout])?;
    let mut out = Vec::with_capacity(b * fout);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm(Mat::new(input.data(), b, fin), Mat::new(weight.data(), fout, fin).t(), &mut out, true);
    Ok((Tensor::new(&[b, fout], out)?, LinearCache { input: input.clone(), weight: weight.clone() }))
}

pub fn linear_backward<T: Real>(grad_out: &Tensor<T>, cache: &LinearCache<T>) -> Result<LinearGrads<T>> {
    let (b, fin) = cache.input.dims2()?;
    let (fout, _) = cache.weight.dims2()?;
    check_cotangent(grad_out, &[b, fout], "linear")?;
    let mut gin = vec![T::zero(); b * fin];
    gemm(Mat::new(grad_out.data(), b, fout), Mat::new(cache.weight.data(), fout, fin), &mut gin, false);
    let mut gw = vec![T::zero(); fout * fin];
    gemm(Mat::new(grad_out.data(), b, fout).t(), Mat::new(cache.input.data(), b, fin), &mut gw, false);
    let mut gb = vec![T::zero(); fout];
    for row in grad_out.data().chunks(fout) {
        gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
    }
    Ok(LinearGrads {
        input: Tensor::new(&[b, fin], gin)?,
        weight: Tensor::new(&[fout, fin], gw)?,
        bias: Tensor::new(&[fout], gb)?,
    })
}

/// Per-element multiplier applied by dropout (0 or 1/(1−p)); `None` in eval mode.
#[derive(Debug, Clone)]
pub struct DropoutCache<T> {
    shape: Vec<usize>,
    mask: Option<Vec<T>>,
}

/// Inverted dropout. With `rng` present (train mode) each unit is zeroed with
/// probability `p` and survivors scaled by 1/(1−p); without it, identity.
pub fn dropout_forward<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    rng: Option<&mut R>,
) -> Result<(Tensor<T>, DropoutCache<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    let Some(rng) = rng else {
        return Ok((input.clone(), DropoutCache { shape: input.shape().to_vec(), mask: None }));
    };
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let out = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((
        Tensor::new(input.shape(), out)?,
        DropoutCache { shape: input.shape().to_vec(), mask: Some(mask) },
    ))
}

pub fn dropout_backward<T: Real>(grad_out: &Tensor<T>, cache: &DropoutCache<T>) -> Result<Tensor<T>> {
    check_cotangent(grad_out, &cache.shape, "dropout")?;
    match &cache.mask {
        None => Ok(grad_out.clone()),
        Some(mask) => {
            let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
            Tensor::new(&cache.shape, data)
        }
    }
}

/// Row-wise softmax over the last axis of a B×K tensor.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        out.extend(softmax_row(row));
    }
    Tensor::new(logits.shape(), out)
}

pub(crate) fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cotangent of the logits given the cotangent of the probabilities.
pub fn softmax_backward<T: Real>(grad_out: &Tensor<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    check_cotangent(grad_out, probs.shape(), "softmax")?;
    let (_, k) = probs.dims2()?;
    let mut out = Vec::with_capacity(probs.len());
    for (g, p) in grad_out.data().chunks(k).zip(probs.data().chunks(k)) {
        let dot: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
        out.extend(g.iter().zip(p).map(|(&a, &b)| b * (a - dot)));
    }
    Tensor::new(probs.shape(), out)
}
