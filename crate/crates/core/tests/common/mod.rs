//! Brute-force references for the test suite. Nothing here calls into the
//! library's attention, RoPE or layer code; models are only read for their
//! weights.
#![allow(dead_code)]

use fam_core::model::Model;
use fam_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat<S: fam_core::Scalar>(t: &Tensor<S>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).iter().map(|x| x.as_f64()).collect()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

/// Sliding-window admissibility for a `T`-token sequence, decided pair by pair.
pub fn brute_force_mask(t_len: usize, b: usize, m: usize, w: Option<usize>) -> Vec<Vec<bool>> {
    let mut out = vec![vec![false; t_len]; t_len];
    for (q, row) in out.iter_mut().enumerate() {
        let q_block = q / b;
        let first_visible_block = q_block.saturating_sub(m);
        for (k, cell) in row.iter_mut().enumerate() {
            let k_block = k / b;
            let mut ok = k <= q && k_block >= first_visible_block;
            if let Some(w) = w {
                ok = ok && k + w > q;
            }
            *cell = ok;
        }
    }
    out
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (r, k, c) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; c]; r];
    for i in 0..r {
        assert_eq!(a[i].len(), k);
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Single-head softmax attention with an explicit loop per query.
pub fn naive_full_attention(q: &Mat, k: &Mat, v: &Mat, causal: bool) -> Mat {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    let mut out = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let n = if causal { i + 1 } else { k.len() };
        let logits: Vec<f64> = (0..n).map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut o = vec![0.0; v[0].len()];
        for j in 0..n {
            for (c, x) in o.iter_mut().enumerate() {
                *x += e[j] / z * v[j][c];
            }
        }
        out.push(o);
    }
    out
}

/// Attention of `q` over `k`/`v` where `allowed[i][j]` admits key `j` for query `i`.
pub fn masked_attention(q: &Mat, k: &Mat, v: &Mat, allowed: &[Vec<bool>], scale: f64) -> Mat {
    let mut out = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let mut logits = Vec::new();
        for (j, kj) in k.iter().enumerate() {
            if allowed[i][j] {
                logits.push((j, qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale));
            }
        }
        let mx = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x.1 - mx).exp()).sum();
        let mut o = vec![0.0; v[0].len()];
        for &(j, l) in &logits {
            let p = (l - mx).exp() / z;
            for (c, x) in o.iter_mut().enumerate() {
                *x += p * v[j][c];
            }
        }
        out.push(o);
    }
    out
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * gain[i] + bias[i]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

/// Rotates consecutive pairs inside each head by `pos·base^(−2i/head_dim)`.
pub fn rope(x: &Mat, positions: &[f64], head_dim: usize, base: f64) -> Mat {
    let mut out = x.clone();
    for (r, row) in out.iter_mut().enumerate() {
        for h in 0..row.len() / head_dim {
            for i in 0..head_dim / 2 {
                let angle = positions[r] * base.powf(-2.0 * i as f64 / head_dim as f64);
                let (a, b) = (x[r][h * head_dim + 2 * i], x[r][h * head_dim + 2 * i + 1]);
                row[h * head_dim + 2 * i] = a * angle.cos() - b * angle.sin();
                row[h * head_dim + 2 * i + 1] = a * angle.sin() + b * angle.cos();
            }
        }
    }
    out
}

fn columns(x: &Mat, start: usize, len: usize) -> Mat {
    x.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Weights of one layer, read by parameter name.
pub struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

pub fn param<S: fam_core::Scalar>(model: &Model<S>, name: &str) -> Tensor<f64> {
    let p = model.params();
    p.get(p.find(name).unwrap_or_else(|| panic!("no parameter {name}"))).value.cast()
}

fn vec_of(t: Tensor<f64>) -> Vec<f64> {
    t.into_data()
}

pub fn layer_weights<S: fam_core::Scalar>(model: &Model<S>, l: usize) -> LayerWeights {
    let p = |s: &str| param(model, &format!("layers.{l}.{s}"));
    LayerWeights {
        ln1_gain: vec_of(p("ln1.gain")),
        ln1_bias: vec_of(p("ln1.bias")),
        wq: to_mat(&p("attn.wq")),
        wk: to_mat(&p("attn.wk")),
        wv: to_mat(&p("attn.wv")),
        wo: to_mat(&p("attn.wo")),
        ln2_gain: vec_of(p("ln2.gain")),
        ln2_bias: vec_of(p("ln2.bias")),
        w1: to_mat(&p("ff.w1")),
        b1: vec_of(p("ff.b1")),
        w2: to_mat(&p("ff.w2")),
        b2: vec_of(p("ff.b2")),
    }
}

#[derive(Clone, Copy)]
pub struct Hyper {
    pub heads: usize,
    pub rope_base: f64,
    pub eps: f64,
}

fn feed_forward(w: &LayerWeights, a: &Mat, eps: f64) -> Mat {
    let h = layer_norm(a, &w.ln2_gain, &w.ln2_bias, eps);
    let z = add_row(&matmul(&h, &w.w1), &w.b1);
    let z: Mat = z.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    add(&add_row(&matmul(&z, &w.w2), &w.b2), a)
}

/// Multi-head attention: rotated queries/keys, per-head masked softmax.
fn multi_head(q: &Mat, k: &Mat, v: &Mat, allowed: &[Vec<bool>], heads: usize) -> Mat {
    let hd = q[0].len() / heads;
    let mut out = vec![vec![0.0; q[0].len()]; q.len()];
    for h in 0..heads {
        let o = masked_attention(&columns(q, h * hd, hd), &columns(k, h * hd, hd), &columns(v, h * hd, hd), allowed, 1.0 / (hd as f64).sqrt());
        for (r, row) in o.iter().enumerate() {
            out[r][h * hd..(h + 1) * hd].copy_from_slice(row);
        }
    }
    out
}

/// Cached keys/values of one past block (unrotated) with their positions.
#[derive(Clone)]
pub struct MemBlock {
    pub k: Mat,
    pub v: Mat,
    pub pos: Vec<f64>,
}

pub struct FamLayerOut {
    pub o: Mat,
    pub f: Mat,
    /// This block's unrotated keys/values, for the next call's memory.
    pub kv: MemBlock,
}

/// One FAM layer over one block, written out step by step:
///
/// - `Q, K, V = QKV(PreLN(I))`
/// - `Qᶠ, Kᶠ, Vᶠ = QKV(PreLN(F_prev))`
/// - input query `t` attends over `[memory ‖ Kᶠ ‖ K[..=t]]`, plus `I`
/// - `O = FF(PreLN(A)) + A`
/// - FAM queries attend over `[Kᶠ ‖ K]`, plus `F_prev` (zero when `first`)
/// - `F = FF(PreLN(Aᶠ)) + Aᶠ`
#[allow(clippy::too_many_arguments)]
pub fn fam_layer_reference(
    input: &Mat,
    f_prev: &Mat,
    memory: &[MemBlock],
    w: &LayerWeights,
    hp: Hyper,
    positions: &[f64],
    fam_pos: &[f64],
    first: bool,
) -> FamLayerOut {
    let hd = input[0].len() / hp.heads;
    let hi = layer_norm(input, &w.ln1_gain, &w.ln1_bias, hp.eps);
    let (q, k, v) = (matmul(&hi, &w.wq), matmul(&hi, &w.wk), matmul(&hi, &w.wv));
    let hf = layer_norm(f_prev, &w.ln1_gain, &w.ln1_bias, hp.eps);
    let (qf, kf, vf) = (matmul(&hf, &w.wq), matmul(&hf, &w.wk), matmul(&hf, &w.wv));

    let qr = rope(&q, positions, hd, hp.rope_base);
    let kr = rope(&k, positions, hd, hp.rope_base);
    let qfr = rope(&qf, fam_pos, hd, hp.rope_base);
    let kfr = rope(&kf, fam_pos, hd, hp.rope_base);

    let mut keys = Vec::new();
    let mut vals = Vec::new();
    for blk in memory {
        keys.extend(rope(&blk.k, &blk.pos, hd, hp.rope_base));
        vals.extend(blk.v.clone());
    }
    let n_mem = keys.len();
    keys.extend(kfr.clone());
    vals.extend(vf.clone());
    let n_fam = kf.len();
    keys.extend(kr.clone());
    vals.extend(v.clone());
    let b = input.len();
    let allowed: Vec<Vec<bool>> =
        (0..b).map(|t| (0..keys.len()).map(|j| j < n_mem + n_fam || j - n_mem - n_fam <= t).collect()).collect();
    let attn = matmul(&multi_head(&qr, &keys, &vals, &allowed, hp.heads), &w.wo);
    let a = add(&attn, input);
    let o = feed_forward(w, &a, hp.eps);

    let mut fkeys = kfr;
    fkeys.extend(kr);
    let mut fvals = vf;
    fvals.extend(v.clone());
    let all = vec![vec![true; fkeys.len()]; f_prev.len()];
    let fattn = matmul(&multi_head(&qfr, &fkeys, &fvals, &all, hp.heads), &w.wo);
    let residual = if first { vec![vec![0.0; f_prev[0].len()]; f_prev.len()] } else { f_prev.clone() };
    let af = add(&fattn, &residual);
    let f = feed_forward(w, &af, hp.eps);
    FamLayerOut { o, f, kv: MemBlock { k, v, pos: positions.to_vec() } }
}

/// A plain causal transformer over the whole sequence (no blocks, no
/// memory), reading the same weights as `model`. Returns next-token logits.
pub fn full_causal_reference<S: fam_core::Scalar>(model: &Model<S>, tokens: &[u32]) -> Mat {
    let cfg = model.config();
    let hp = Hyper { heads: cfg.num_heads, rope_base: cfg.rope.base_frequency, eps: cfg.ln_eps };
    let hd = cfg.d_model / cfg.num_heads;
    let embed = to_mat(&param(model, "embed.weight"));
    let mut x: Mat = tokens.iter().map(|&t| embed[t as usize].clone()).collect();
    let positions: Vec<f64> = (0..tokens.len()).map(|p| p as f64).collect();
    let causal: Vec<Vec<bool>> = (0..tokens.len()).map(|i| (0..tokens.len()).map(|j| j <= i).collect()).collect();
    for l in 0..cfg.num_layers {
        let w = layer_weights(model, l);
        let h = layer_norm(&x, &w.ln1_gain, &w.ln1_bias, hp.eps);
        let q = rope(&matmul(&h, &w.wq), &positions, hd, hp.rope_base);
        let k = rope(&matmul(&h, &w.wk), &positions, hd, hp.rope_base);
        let v = matmul(&h, &w.wv);
        let a = add(&matmul(&multi_head(&q, &k, &v, &causal, hp.heads), &w.wo), &x);
        x = feed_forward(&w, &a, hp.eps);
    }
    let g = vec_of(param(model, "final_ln.gain"));
    let b = vec_of(param(model, "final_ln.bias"));
    let h = layer_norm(&x, &g, &b, hp.eps);
    add_row(&matmul(&h, &to_mat(&param(model, "head.weight"))), &vec_of(param(model, "head.bias")))
}

/// `Σ p̄ log p̄` per group of `rows` rows, averaged over groups, by direct loops.
pub fn diversity_reference(data: &[f64], groups: usize, rows: usize, keys: usize) -> f64 {
    let mut total = 0.0;
    for g in 0..groups {
        for j in 0..keys {
            let mut mean = 0.0;
            for r in 0..rows {
                mean += data[(g * rows + r) * keys + j];
            }
            mean /= rows as f64;
            if mean > 0.0 {
                total += mean * mean.ln();
            }
        }
    }
    total / groups as f64
}

/// Weighted mean NLL by direct loops.
pub fn xent_reference(logits: &Mat, targets: &[usize], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, row) in logits.iter().enumerate() {
        if weights[i] == 0.0 {
            continue;
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        num += weights[i] * (lse - row[targets[i]]);
        den += weights[i];
    }
    num / den
}
