use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: [usize; 4],
    out_shape: [usize; 4],
    /// Flat input index of each output's maximum.
    argmax: Vec<usize>,
}

impl PoolCache {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2×2 max pooling with stride 2; a trailing odd row or column is dropped.
/// Ties go to the first maximal element in row-major window order.
pub fn maxpool2d_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let (b, c, h, w) = input.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("maxpool2d: input {h}×{w} is smaller than 2×2")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let out_shape = [b, c, oh, ow];
    Ok((Tensor::new(&out_shape, out)?, PoolCache { input_shape: [b, c, h, w], out_shape, argmax }))
}

pub fn maxpool2d_backward<T: Real>(grad_out: &Tensor<T>, cache: &PoolCache) -> Result<Tensor<T>> {
    if grad_out.shape() != cache.out_shape {
        return Err(Error::StaleCache(format!(
            "maxpool2d backward: cotangent {:?} does not match forward output {:?}",
            grad_out.shape(),
            cache.out_shape
        )));
    }
    let mut grad = Tensor::zeros(&cache.input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in cache.argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}
