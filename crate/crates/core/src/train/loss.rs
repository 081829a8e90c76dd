use crate::error::Result;
use crate::nn::{check_targets, cross_entropy, log_softmax_row};
use crate::tensor::{Real, Tensor};

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Average of cross-entropy and the squared error of the expected grade.
    Combined,
}

impl LossKind {
    pub fn evaluate<T: Real>(self, logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
        match self {
            LossKind::CrossEntropy => cross_entropy(logits, targets),
            LossKind::Combined => combined_loss(logits, targets),
        }
    }
}

/// `½·CE + ½·mean((E[grade] − target)²)` where `E[grade] = Σ_j j·softmax_j`,
/// with its exact gradient.
pub fn combined_loss<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = logits.dims2()?;
    check_targets(targets, b, k)?;
    let (ce, ce_grad) = cross_entropy(logits, targets)?;
    let half = T::from_f64_lossy(0.5);
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let mut sq = T::zero();
    let mut grad = ce_grad.scale(half).into_data();
    for (bi, (row, &t)) in logits.data().chunks(k).zip(targets).enumerate() {
        let p: Vec<T> = log_softmax_row(row).into_iter().map(T::exp).collect();
        let expected: T = p.iter().enumerate().map(|(j, &pj)| T::from_usize(j).unwrap() * pj).sum();
        let err = expected - T::from_usize(t).unwrap();
        sq += err * err;
        // d/dz_j of ½·(1/B)·err² = (1/B)·err·p_j·(j − E)
        for (j, &pj) in p.iter().enumerate() {
            grad[bi * k + j] += inv_b * err * pj * (T::from_usize(j).unwrap() - expected);
        }
    }
    Ok((half * ce + half * sq * inv_b, Tensor::new(&[b, k], grad)?))
}
