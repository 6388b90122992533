//! Slice-level kernels shared by the eager ops and the tape. All reductions
//! run in a fixed order so repeated evaluation is bit-identical.

use crate::numerics::Scalar;

/// `out[r×c] += a[r×k] · b[k×c]`
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[r×c] += a[r×k] · b[c×k]ᵀ`
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            out[i * c + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[r×c] += a[k×r]ᵀ · b[k×c]`
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], k: usize, r: usize, c: usize) {
    for p in 0..k {
        let a_row = &a[p * r..(p + 1) * r];
        let b_row = &b[p * c..(p + 1) * c];
        for (i, &api) in a_row.iter().enumerate() {
            if api == S::zero() {
                continue;
            }
            let out_row = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for ch in 0..chunks {
        let aa = &a[ch * 8..ch * 8 + 8];
        let bb = &b[ch * 8..ch * 8 + 8];
        for l in 0..8 {
            acc[l] += aa[l] * bb[l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::of(3.0) * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}
