use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub(crate) fn check_targets(targets: &[usize], b: usize, k: usize) -> Result<()> {
    if targets.len() != b {
        return Err(Error::shape(format!("{} targets for a batch of {b}", targets.len())));
    }
    if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
        return Err(Error::invalid(format!("target {t} at position {i} outside [0, {k})")));
    }
    Ok(())
}

/// Log-softmax of one row via log-sum-exp.
pub(crate) fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Mean cross-entropy of B×K logits against class indices, with its
/// gradient `(softmax − onehot) / B`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = logits.dims2()?;
    check_targets(targets, b, k)?;
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(b * k);
    for (row, &t) in logits.data().chunks(k).zip(targets) {
        let logp = log_softmax_row(row);
        loss -= logp[t];
        grad.extend(logp.iter().enumerate().map(|(j, &lp)| {
            let onehot = if j == t { T::one() } else { T::zero() };
            (lp.exp() - onehot) * inv_b
        }));
    }
    Ok((loss * inv_b, Tensor::new(&[b, k], grad)?))
}
