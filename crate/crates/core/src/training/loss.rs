use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Scalar, Tensor};

/// `Σ wᵢ·(−log softmax(logitsᵢ)[targetᵢ]) / Σ wᵢ`.
pub fn weighted_xent<S: Scalar>(logits: &Tensor<S>, targets: &[usize], weights: &[S]) -> Result<S> {
    let norm: S = weights.iter().copied().sum();
    if norm == S::zero() {
        return Err(Error::ZeroWeight);
    }
    let mut g = Graph::new();
    let x = g.constant(logits.clone())?;
    let loss = g.weighted_xent(x, targets, weights, norm)?;
    Ok(g.value(loss).item())
}

/// Mean over batch lanes and blocks of `Σ p̄ log p̄`, where `p̄` averages the
/// attention rows of one block over heads and queries. `probs` has shape
/// `[B, T, H, Lq, Lk]`. The result lies in `[−log Lk, 0]`.
pub fn diversity_loss<S: Scalar>(probs: &Tensor<S>) -> Result<S> {
    let &[b, t, h, lq, lk] = probs.shape() else {
        return shape_err("diversity_loss", format!("expected rank 5, got {:?}", probs.shape()));
    };
    if b * t == 0 || h * lq == 0 || lk == 0 {
        return shape_err("diversity_loss", "empty extent");
    }
    let rows = h * lq;
    let mut mean = vec![S::zero(); lk];
    let mut total = S::zero();
    for group in probs.data().chunks_exact(rows * lk) {
        mean.fill(S::zero());
        for row in group.chunks_exact(lk) {
            for (m, &p) in mean.iter_mut().zip(row) {
                *m += p;
            }
        }
        let inv = S::one() / S::of(rows as f64);
        total += mean
            .iter()
            .map(|&m| {
                let p = m * inv;
                if p > S::zero() {
                    p * p.ln()
                } else {
                    S::zero()
                }
            })
            .sum::<S>();
    }
    Ok(total / S::of((b * t) as f64))
}
