use crate::attention::AttentionMask;
use crate::error::Result;
use crate::numerics::{Graph, Scalar, Tensor};

/// Multi-head masked scaled-dot-product attention, evaluated eagerly.
///
/// `q` is `Lq×d`, `k` and `v` are `Lk×d`; `d` is split into `heads` equal
/// slices and `scale` multiplies every logit (usually `1/√head_dim`).
pub fn attend<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &AttentionMask,
    heads: usize,
    scale: S,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone())?, g.constant(k.clone())?, g.constant(v.clone())?);
    let p = g.attn_probs(qv, kv, mask, heads, scale)?;
    let out = g.attn_apply(p, vv, heads)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Role;
    use crate::error::Error;

    #[test]
    fn singleton_key_returns_its_value() {
        let q = Tensor::from_rows(&[vec![0.5f64, -1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0]]).unwrap();
        let mask = AttentionMask::from_fn(vec![Role::Input], vec![Role::Cur; 2], |_, c| c == 1);
        let out = attend(&q, &k, &v, &mask, 1, 0.7).unwrap();
        assert_eq!(out.data(), &[9.0, 10.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::from_rows(&[vec![0.5f64, -1.0], vec![2.0, 1.0]]).unwrap();
        let k = Tensor::from_rows(&vec![vec![1.0, 2.0]; 3]).unwrap();
        let v = Tensor::from_rows(&[vec![3.0, 0.0], vec![6.0, 3.0], vec![0.0, 9.0]]).unwrap();
        let mask = AttentionMask::causal(3);
        let q3 = Tensor::concat_rows(&[&q, &q.slice_rows(0, 1)]).unwrap();
        let out = attend(&q3, &k, &v, &mask, 1, 1.0).unwrap();
        assert!((out.at(1, 0) - 4.5).abs() < 1e-12 && (out.at(1, 1) - 1.5).abs() < 1e-12);
        assert!((out.at(2, 0) - 3.0).abs() < 1e-12 && (out.at(2, 1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_fails() {
        let q = Tensor::<f64>::zeros(&[1, 2]);
        let mask = AttentionMask::from_fn(vec![Role::Input], vec![Role::Cur], |_, _| false);
        assert!(matches!(attend(&q, &q, &q, &mask, 1, 1.0), Err(Error::EmptyMaskRow { .. })));
    }
}
