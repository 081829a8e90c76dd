use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Saved forward state of a valid (unpadded) 2-D convolution.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input_shape: [usize; 4],
    out_shape: [usize; 4],
    kernel_size: usize,
    stride: usize,
    kernels: Tensor<T>,
    /// The unfolded input is rebuilt per sample in the backward pass rather
    /// than stored, which keeps the cache 9× smaller.
    input: Tensor<T>,
}

impl<T> ConvCache<T> {
    pub fn out_shape(&self) -> [usize; 4] {
        self.out_shape
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize) -> Option<usize> {
    (extent >= kernel && stride > 0).then(|| (extent - kernel) / stride + 1)
}

fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let hw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let src = &plane[(oy * stride + ki) * w + kj..];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        out.copy_from_slice(&src[..ow]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = src[ox * stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    (oh, ow): (usize, usize),
    x: &mut [T],
) {
    let hw = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let base = (oy * stride + ki) * w + kj;
                    for ox in 0..ow {
                        plane[base + ox * stride] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Valid 2-D cross-correlation: `input` B×C×H×W, `kernels` F×C×k×k, `bias` F.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (b, c, h, w) = input.dims4()?;
    let (f, kc, kh, kw) = kernels.dims4()?;
    if kc != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels but kernels expect {kc} (input {:?}, kernels {:?})",
            input.shape(),
            kernels.shape()
        )));
    }
    if kh != kw {
        return Err(Error::shape(format!("conv2d: non-square kernel {kh}×{kw}")));
    }
    bias.expect_shape(&[f])?;
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    let k = kh;
    let (oh, ow) = match (conv_out_extent(h, k, stride), conv_out_extent(w, k, stride)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(format!(
                "conv2d: input {h}×{w} smaller than kernel {k}×{k}"
            )))
        }
    };
    let ckk = c * k * k;
    let hw = oh * ow;
    let mut block = vec![T::zero(); ckk * hw];
    let mut out = vec![T::zero(); b * f * hw];
    for bi in 0..b {
        im2col(input.slab(bi), (c, h, w), k, stride, (oh, ow), &mut block);
        let dst = &mut out[bi * f * hw..(bi + 1) * f * hw];
        for (fi, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[fi]);
        }
        gemm(Mat::new(kernels.data(), f, ckk), Mat::new(&block, ckk, hw), dst, true);
    }
    let out_shape = [b, f, oh, ow];
    Ok((
        Tensor::new(&out_shape, out)?,
        ConvCache {
            input_shape: [b, c, h, w],
            out_shape,
            kernel_size: k,
            stride,
            kernels: kernels.clone(),
            input: input.clone(),
        },
    ))
}

fn backward_impl<T: Real>(
    grad_out: &Tensor<T>,
    cache: &ConvCache<T>,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != cache.out_shape {
        return Err(Error::StaleCache(format!(
            "conv2d backward: cotangent {:?} does not match forward output {:?}",
            grad_out.shape(),
            cache.out_shape
        )));
    }
    let [b, c, h, w] = cache.input_shape;
    let [_, f, oh, ow] = cache.out_shape;
    let k = cache.kernel_size;
    let ckk = c * k * k;
    let hw = oh * ow;
    if cache.input.shape() != cache.input_shape {
        return Err(Error::StaleCache("conv2d backward: saved input has wrong shape".into()));
    }
    let mut gk = vec![T::zero(); f * ckk];
    let mut gb = vec![T::zero(); f];
    let mut gin = want_input.then(|| vec![T::zero(); b * c * h * w]);
    let mut dcols = vec![T::zero(); if want_input { ckk * hw } else { 0 }];
    let mut block = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        let go = grad_out.slab(bi);
        for (fi, row) in go.chunks(hw).enumerate() {
            gb[fi] += row.iter().copied().sum::<T>();
        }
        im2col(cache.input.slab(bi), (c, h, w), k, cache.stride, (oh, ow), &mut block);
        gemm(Mat::new(go, f, hw), Mat::new(&block, ckk, hw).t(), &mut gk, true);
        if let Some(gin) = gin.as_mut() {
            gemm(Mat::new(cache.kernels.data(), f, ckk).t(), Mat::new(go, f, hw), &mut dcols, false);
            let dst = &mut gin[bi * c * h * w..(bi + 1) * c * h * w];
            col2im_add(&dcols, (c, h, w), k, cache.stride, (oh, ow), dst);
        }
    }
    let gin = gin.map(|g| Tensor::new(&cache.input_shape, g)).transpose()?;
    Ok((gin, Tensor::new(&[f, c, k, k], gk)?, Tensor::new(&[f], gb)?))
}

pub fn conv2d_backward<T: Real>(grad_out: &Tensor<T>, cache: &ConvCache<T>) -> Result<ConvGrads<T>> {
    let (input, kernels, bias) = backward_impl(grad_out, cache, true)?;
    Ok(ConvGrads { input: input.expect("requested"), kernels, bias })
}

/// Kernel and bias gradients only, for layers whose input needs no gradient.
pub fn conv2d_backward_params<T: Real>(
    grad_out: &Tensor<T>,
    cache: &ConvCache<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, kernels, bias) = backward_impl(grad_out, cache, false)?;
    Ok((kernels, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-loop convolution.
    fn conv_oracle(x: &Tensor<f64>, kern: &Tensor<f64>, bias: &Tensor<f64>, s: usize) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4().unwrap();
        let (f, _, k, _) = kern.dims4().unwrap();
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let xd = x.data();
        let kd = kern.data();
        let mut out = Tensor::zeros(&[b, f, oh, ow]);
        let od = out.data_mut();
        for bi in 0..b {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[fi];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    acc += xd[((bi * c + ci) * h + oy * s + ki) * w + ox * s + kj]
                                        * kd[((fi * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        od[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::<f64>::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let (y, _) = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn sum_kernel() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let (y, _) = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn matches_direct_oracle_stride_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let bias = random(&[4], &mut rng);
        let (y, _) = conv2d_forward(&x, &k, &bias, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        let want = conv_oracle(&x, &k, &bias, 2);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_oracle_many_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let b = rng.random_range(1..3);
            let c = rng.random_range(1..4);
            let f = rng.random_range(1..5);
            let k = rng.random_range(1..4);
            let s = rng.random_range(1..3);
            let h = rng.random_range(k..k + 7);
            let w = rng.random_range(k..k + 7);
            let x = random(&[b, c, h, w], &mut rng);
            let kern = random(&[f, c, k, k], &mut rng);
            let bias = random(&[f], &mut rng);
            let (y, _) = conv2d_forward(&x, &kern, &bias, s).unwrap();
            let want = conv_oracle(&x, &kern, &bias, s);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1).unwrap_err();
        assert!(matches!(err, Error::Shape(msg) if msg.contains("2 channels")));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let (y, cache) = conv2d_forward(&x, &k, &Tensor::zeros(&[3]), 1).unwrap();
        let g = conv2d_backward(&Tensor::zeros(y.shape()), &cache).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.kernels.max_abs(), 0.0);
        assert_eq!(g.bias.max_abs(), 0.0);
    }

    #[test]
    fn scalar_chain_rule() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::<f64>::new(&[1, 1, 1, 1], vec![-2.0]).unwrap();
        let (_, cache) = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1).unwrap();
        let go = Tensor::new(&[1, 1, 1, 1], vec![0.5]).unwrap();
        let g = conv2d_backward(&go, &cache).unwrap();
        assert_eq!(g.kernels.data(), &[0.5 * 3.0]);
        assert_eq!(g.input.data(), &[0.5 * -2.0]);
        assert_eq!(g.bias.data(), &[0.5]);
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let (_, cache) = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1).unwrap();
        let bad = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d_backward(&bad, &cache), Err(Error::StaleCache(_))));
    }
}
