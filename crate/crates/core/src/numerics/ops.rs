//! Eager (tape-free) tensor operations.

use crate::attention::AttentionMask;
use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels;
use crate::numerics::{Scalar, Tensor};

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
    }
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[r, c]);
    kernels::matmul_acc(a.data(), b.data(), out.data_mut(), r, k, c);
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Row-wise softmax over admissible entries; masked entries are exactly zero.
pub fn softmax_masked<S: Scalar>(logits: &Tensor<S>, mask: &AttentionMask) -> Result<Tensor<S>> {
    if logits.rows() != mask.rows() || logits.cols() != mask.cols() {
        return shape_err(
            "softmax_masked",
            format!("logits {:?} vs mask {}x{}", logits.shape(), mask.rows(), mask.cols()),
        );
    }
    let mut out = Tensor::zeros(logits.shape());
    let cols = logits.cols();
    for r in 0..logits.rows() {
        softmax_row(logits.row(r), mask.row(r), &mut out.data_mut()[r * cols..(r + 1) * cols])
            .map_err(|_| Error::EmptyMaskRow { row: r })?;
    }
    out.ensure_finite("softmax_masked")?;
    Ok(out)
}

/// Max-subtracted softmax of one row. Errors when no entry is admissible.
pub(crate) fn softmax_row<S: Scalar>(logits: &[S], allowed: &[bool], out: &mut [S]) -> std::result::Result<(), ()> {
    let mut max = S::neg_infinity();
    for (&x, &ok) in logits.iter().zip(allowed) {
        if ok && x > max {
            max = x;
        }
    }
    if max == S::neg_infinity() {
        return Err(());
    }
    let mut sum = S::zero();
    for ((o, &x), &ok) in out.iter_mut().zip(logits).zip(allowed) {
        *o = if ok { (x - max).exp() } else { S::zero() };
        sum += *o;
    }
    let inv = S::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// Normalizes over the last axis, then applies `gain` and `bias`.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let d = x.cols();
    if d == 0 || gain.len() != d || bias.len() != d {
        return shape_err("layer_norm", format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()));
    }
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let (xhat, _) = normalize_row(x.row(r), eps);
        let o = &mut out.data_mut()[r * d..(r + 1) * d];
        for i in 0..d {
            o[i] = xhat[i] * gain.data()[i] + bias.data()[i];
        }
    }
    out.ensure_finite("layer_norm")?;
    Ok(out)
}

/// Returns the normalized row and its reciprocal standard deviation.
pub(crate) fn normalize_row<S: Scalar>(row: &[S], eps: S) -> (Vec<S>, S) {
    let n = S::of(row.len() as f64);
    let mut mean = S::zero();
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = S::zero();
    for &v in row {
        let c = v - mean;
        var += c * c;
    }
    var /= n;
    let rstd = S::one() / (var + eps).sqrt();
    (row.iter().map(|&v| (v - mean) * rstd).collect(), rstd)
}

pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(kernels::gelu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_matmul() {
        let i = Tensor::<f64>::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        assert_eq!(matmul(&i, &i).unwrap(), i);
    }

    #[test]
    fn small_matmul() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(3, 4, 1);
        let b = random(4, 2, 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(i, p) * b.at(p, j);
                }
                assert!((c.at(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = random(3, 4, 1);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_softmax() {
        let x = Tensor::<f64>::zeros(&[1, 4]);
        let p = softmax_masked(&x, &AttentionMask::full(1, 4)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn masked_large_logit_ignored() {
        let x = Tensor::from_rows(&[vec![0.0f64, 1e6]]).unwrap();
        let mask = AttentionMask::from_fn(vec![crate::attention::Role::Input], vec![crate::attention::Role::Cur; 2], |_, c| c == 0);
        let p = softmax_masked(&x, &mask).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn random_softmax_rows_sum_to_one() {
        let x = random(3, 5, 3).map(|v| v * 10.0);
        let p = softmax_masked(&x, &AttentionMask::full(3, 5)).unwrap();
        for r in 0..3 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let mask = AttentionMask::from_fn(vec![crate::attention::Role::Input; 2], vec![crate::attention::Role::Cur; 2], |r, _| r == 0);
        assert!(matches!(softmax_masked(&x, &mask), Err(Error::EmptyMaskRow { row: 1 })));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[2], 1.0f64);
        let zeros = Tensor::zeros(&[2]);
        let c = Tensor::full(&[1, 2], 3.0f64);
        assert!(layer_norm(&c, &ones, &zeros, 1e-6).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_rows(&[vec![1.0f64, -1.0]]).unwrap();
        assert_eq!(layer_norm(&x, &ones, &zeros, 0.0).unwrap().data(), &[1.0, -1.0]);

        let x = random(1, 16, 9).map(|v| v * 5.0 + 2.0);
        let y = layer_norm(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-6).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 16.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-12);
        assert!((var - 1.0).abs() <= 1e-6);
    }
}
