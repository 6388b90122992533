//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar node with
//! respect to every node that depends on an input or parameter.

use crate::attention::AttentionMask;
use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels::{self, axpy, dot};
use crate::numerics::ops::{normalize_row, softmax_row};
use crate::numerics::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed rotation table: one `(cos, sin)` per row and rotation pair.
#[derive(Clone, Debug)]
pub struct RotationTable<S> {
    pub rows: usize,
    pub pairs: usize,
    pub cos: Vec<S>,
    pub sin: Vec<S>,
}

enum Op<S> {
    Input,
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Sum(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu(Var),
    Rotate { x: Var, table: RotationTable<S>, head_dim: usize },
    Softmax { x: Var },
    AttnProbs { q: Var, k: Var, heads: usize, scale: S, mask: AttentionMask },
    AttnApply { p: Var, v: Var, heads: usize },
    Embedding { table: Var, ids: Vec<usize> },
    WeightedXent { logits: Var, targets: Vec<usize>, weights: Vec<S>, norm: S },
    NegEntropy { p: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// The tape.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose gradient is tracked (used for sensitivity probes).
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Input, true, "input")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Constant, false, "constant")
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<Var> {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id), true, "param")
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(&[r, c]);
        kernels::matmul_acc(ta.data(), tb.data(), out.data_mut(), r, k, c);
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return shape_err("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        let c = tx.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let ng = self.any_grad(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), ng, "add_bias")
    }

    pub fn scale(&mut self, x: Var, s: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), ng, "scale")
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// Sum of a list of one-element tensors.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = *xs.first().ok_or_else(|| Error::Config("add_scalars needs inputs".into()))?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let ng = self.any_grad(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows() {
            return shape_err("slice_rows", format!("{start}..{end} of {:?}", t.shape()));
        }
        let out = t.slice_rows(start, end);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::SliceRows(x, start), ng, "slice_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d == 0 || tg.len() != d || tb.len() != d {
            return shape_err("layer_norm", format!("x {:?} gain {:?}", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut out = Tensor::zeros(tx.shape());
        let mut xhat_all = Vec::with_capacity(rows * d);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let (xhat, rstd) = normalize_row(tx.row(r), eps);
            let o = &mut out.data_mut()[r * d..(r + 1) * d];
            for i in 0..d {
                o[i] = xhat[i] * tg.data()[i] + tb.data()[i];
            }
            xhat_all.extend_from_slice(&xhat);
            rstds.push(rstd);
        }
        let ng = self.any_grad(&[x, gain, bias]);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat: xhat_all, rstd: rstds }, ng, "layer_norm")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), ng, "gelu")
    }

    /// Rotates consecutive column pairs of every `head_dim`-wide head.
    pub fn rotate(&mut self, x: Var, table: RotationTable<S>, head_dim: usize) -> Result<Var> {
        let t = self.value(x);
        if head_dim == 0 || !head_dim.is_multiple_of(2) || !t.cols().is_multiple_of(head_dim) {
            return shape_err("rotate", format!("cols {} head_dim {head_dim}", t.cols()));
        }
        if table.rows != t.rows() || table.pairs != head_dim / 2 {
            return shape_err("rotate", format!("table {}x{} for {:?}", table.rows, table.pairs, t.shape()));
        }
        let mut out = t.clone();
        rotate_rows(out.data_mut(), t.cols(), head_dim, &table, false);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Rotate { x, table, head_dim }, ng, "rotate")
    }

    pub fn softmax_masked(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let out = crate::numerics::ops::softmax_masked(self.value(x), mask)?;
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Softmax { x }, ng, "softmax_masked")
    }

    /// Multi-head attention probabilities. `q` is `Lq×d`, `k` is `Lk×d`; the
    /// result is `(heads·Lq)×Lk`, head-major, with masked entries exactly zero.
    pub fn attn_probs(&mut self, q: Var, k: Var, mask: &AttentionMask, heads: usize, scale: S) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        let d = tq.cols();
        if tk.cols() != d || heads == 0 || d % heads != 0 {
            return shape_err("attn_probs", format!("q {:?} k {:?} heads {heads}", tq.shape(), tk.shape()));
        }
        let (lq, lk) = (tq.rows(), tk.rows());
        if mask.rows() != lq || mask.cols() != lk {
            return shape_err("attn_probs", format!("mask {}x{} for {lq}x{lk}", mask.rows(), mask.cols()));
        }
        let hd = d / heads;
        let mut out = Tensor::zeros(&[heads * lq, lk]);
        let mut logits = vec![S::zero(); lk];
        for h in 0..heads {
            for i in 0..lq {
                let qrow = &tq.row(i)[h * hd..(h + 1) * hd];
                let allowed = mask.row(i);
                for j in 0..lk {
                    logits[j] = if allowed[j] { scale * dot(qrow, &tk.row(j)[h * hd..(h + 1) * hd]) } else { S::zero() };
                }
                let r = h * lq + i;
                softmax_row(&logits, allowed, &mut out.data_mut()[r * lk..(r + 1) * lk])
                    .map_err(|_| Error::EmptyMaskRow { row: i })?;
            }
        }
        let ng = self.any_grad(&[q, k]);
        self.push(out, Op::AttnProbs { q, k, heads, scale, mask: mask.clone() }, ng, "attn_probs")
    }

    /// Mixes values with probabilities from [`Graph::attn_probs`]; `Lq×d` out.
    pub fn attn_apply(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let (tp, tv) = (self.value(p), self.value(v));
        let (d, lk) = (tv.cols(), tv.rows());
        if heads == 0 || d % heads != 0 || tp.cols() != lk || tp.rows() % heads != 0 {
            return shape_err("attn_apply", format!("p {:?} v {:?}", tp.shape(), tv.shape()));
        }
        let lq = tp.rows() / heads;
        let hd = d / heads;
        let mut out = Tensor::zeros(&[lq, d]);
        for h in 0..heads {
            for i in 0..lq {
                let prow = tp.row(h * lq + i);
                let orow = &mut out.data_mut()[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, &pij) in prow.iter().enumerate() {
                    if pij != S::zero() {
                        axpy(pij, &tv.row(j)[h * hd..(h + 1) * hd], orow);
                    }
                }
            }
        }
        let ng = self.any_grad(&[p, v]);
        self.push(out, Op::AttnApply { p, v, heads }, ng, "attn_apply")
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return shape_err("embedding", format!("id {bad} out of vocabulary {vocab}"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.any_grad(&[table]);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, ng, "embedding")
    }

    /// `Σ wᵢ·nllᵢ / norm` over the rows of `logits`; rows with zero weight are skipped.
    pub fn weighted_xent(&mut self, logits: Var, targets: &[usize], weights: &[S], norm: S) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != targets.len() || targets.len() != weights.len() {
            return shape_err("weighted_xent", format!("{} rows, {} targets, {} weights", t.rows(), targets.len(), weights.len()));
        }
        if norm == S::zero() {
            return Err(Error::ZeroWeight);
        }
        let vocab = t.cols();
        let mut total = S::zero();
        for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            if w == S::zero() {
                continue;
            }
            if y >= vocab {
                return shape_err("weighted_xent", format!("target {y} out of vocabulary {vocab}"));
            }
            total += w * (log_sum_exp(t.row(r)) - t.row(r)[y]);
        }
        let out = Tensor::scalar(total / norm);
        let ng = self.any_grad(&[logits]);
        let op = Op::WeightedXent { logits, targets: targets.to_vec(), weights: weights.to_vec(), norm };
        self.push(out, op, ng, "weighted_xent")
    }

    /// `Σⱼ p̄ⱼ log p̄ⱼ` where `p̄` is the mean of the rows of `p` (`0·log 0 = 0`).
    pub fn neg_entropy_of_mean(&mut self, p: Var) -> Result<Var> {
        let mean = column_mean(self.value(p));
        let value = mean.iter().map(|&x| if x > S::zero() { x * x.ln() } else { S::zero() }).sum();
        let ng = self.any_grad(&[p]);
        self.push(Tensor::scalar(value), Op::NegEntropy { p }, ng, "neg_entropy_of_mean")
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<S>, store: &mut ParamStore<S>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.get(Var(i)) {
                    store.get_mut(id).grad.add_assign(g);
                }
            }
        }
    }

    fn backward_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Input | Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs_grad(*a) {
                    let ga = slot(grads, *a, ta.shape());
                    kernels::matmul_nt_acc(g.data(), tb.data(), ga.data_mut(), r, c, k);
                }
                if self.needs_grad(*b) {
                    let gb = slot(grads, *b, tb.shape());
                    kernels::matmul_tn_acc(ta.data(), g.data(), gb.data_mut(), r, k, c);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs_grad(v) {
                        slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let ga = slot(grads, *a, ta.shape());
                    for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if self.needs_grad(*b) {
                    let gb = slot(grads, *b, tb.shape());
                    for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs_grad(*x) {
                    slot(grads, *x, g.shape()).add_assign(g);
                }
                if self.needs_grad(*bias) {
                    let tb = self.value(*bias);
                    let gb = slot(grads, *bias, tb.shape());
                    for row in g.data().chunks(tb.len()) {
                        for (o, &gv) in gb.data_mut().iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.needs_grad(*x) {
                    let gx = slot(grads, *x, g.shape());
                    axpy(*s, g.data(), gx.data_mut());
                }
            }
            Op::Sum(x) => {
                if self.needs_grad(*x) {
                    let tx = self.value(*x);
                    let gv = g.item();
                    let gx = slot(grads, *x, tx.shape());
                    gx.data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs_grad(p) {
                        let shape = self.value(p).shape().to_vec();
                        let gp = slot(grads, p, &shape);
                        axpy(S::one(), &g.data()[offset..offset + n], gp.data_mut());
                    }
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                if self.needs_grad(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let gx = slot(grads, *x, tx.shape());
                    axpy(S::one(), g.data(), &mut gx.data_mut()[start * c..start * c + g.len()]);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.value(*gain);
                let d = tg.len();
                let rows = g.len() / d;
                if self.needs_grad(*gain) {
                    let gg = slot(grads, *gain, tg.shape());
                    for r in 0..rows {
                        for i in 0..d {
                            gg.data_mut()[i] += g.data()[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
                if self.needs_grad(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    let gb = slot(grads, *bias, &shape);
                    for row in g.data().chunks(d) {
                        axpy(S::one(), row, gb.data_mut());
                    }
                }
                if self.needs_grad(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let gx = slot(grads, *x, &shape);
                    let n = S::of(d as f64);
                    let mut dxhat = vec![S::zero(); d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for i in 0..d {
                            dxhat[i] = g.data()[r * d + i] * tg.data()[i];
                            mean_d += dxhat[i];
                            mean_dx += dxhat[i] * xh[i];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for i in 0..d {
                            out[i] += rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.needs_grad(*x) {
                    let tx = self.value(*x);
                    let gx = slot(grads, *x, tx.shape());
                    for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        *o += gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Rotate { x, table, head_dim } => {
                if self.needs_grad(*x) {
                    let mut back = g.clone();
                    rotate_rows(back.data_mut(), g.cols(), *head_dim, table, true);
                    slot(grads, *x, g.shape()).add_assign(&back);
                }
            }
            Op::Softmax { x } => {
                if self.needs_grad(*x) {
                    let y = &node.value;
                    let c = y.cols();
                    let gx = slot(grads, *x, y.shape());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            gx.data_mut()[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::AttnProbs { q, k, heads, scale, mask } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let p = &node.value;
                let (lq, lk, d) = (tq.rows(), tk.rows(), tq.cols());
                let hd = d / heads;
                let mut dq = Tensor::zeros(tq.shape());
                let mut dk = Tensor::zeros(tk.shape());
                let mut ds = vec![S::zero(); lk];
                for h in 0..*heads {
                    for i in 0..lq {
                        let r = h * lq + i;
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let s = dot(pr, gr);
                        let allowed = mask.row(i);
                        for j in 0..lk {
                            ds[j] = if allowed[j] { pr[j] * (gr[j] - s) * *scale } else { S::zero() };
                        }
                        let qrow = &tq.row(i)[h * hd..(h + 1) * hd];
                        let dq_row = &mut dq.data_mut()[i * d + h * hd..i * d + (h + 1) * hd];
                        for j in 0..lk {
                            if ds[j] != S::zero() {
                                axpy(ds[j], &tk.row(j)[h * hd..(h + 1) * hd], dq_row);
                            }
                        }
                        for j in 0..lk {
                            if ds[j] != S::zero() {
                                axpy(ds[j], qrow, &mut dk.data_mut()[j * d + h * hd..j * d + (h + 1) * hd]);
                            }
                        }
                    }
                }
                if self.needs_grad(*q) {
                    slot(grads, *q, tq.shape()).add_assign(&dq);
                }
                if self.needs_grad(*k) {
                    slot(grads, *k, tk.shape()).add_assign(&dk);
                }
            }
            Op::AttnApply { p, v, heads } => {
                let (tp, tv) = (self.value(*p), self.value(*v));
                let (lk, d) = (tv.rows(), tv.cols());
                let lq = tp.rows() / heads;
                let hd = d / heads;
                if self.needs_grad(*p) {
                    let gp = slot(grads, *p, tp.shape());
                    for h in 0..*heads {
                        for i in 0..lq {
                            let grow = &g.row(i)[h * hd..(h + 1) * hd];
                            let r = h * lq + i;
                            for j in 0..lk {
                                gp.data_mut()[r * lk + j] += dot(grow, &tv.row(j)[h * hd..(h + 1) * hd]);
                            }
                        }
                    }
                }
                if self.needs_grad(*v) {
                    let gv = slot(grads, *v, tv.shape());
                    for h in 0..*heads {
                        for i in 0..lq {
                            let grow = &g.row(i)[h * hd..(h + 1) * hd];
                            let prow = tp.row(h * lq + i);
                            for (j, &pij) in prow.iter().enumerate() {
                                if pij != S::zero() {
                                    axpy(pij, grow, &mut gv.data_mut()[j * d + h * hd..j * d + (h + 1) * hd]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs_grad(*table) {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let gt = slot(grads, *table, tt.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(S::one(), &g.data()[r * d..(r + 1) * d], &mut gt.data_mut()[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::WeightedXent { logits, targets, weights, norm } => {
                if self.needs_grad(*logits) {
                    let tl = self.value(*logits);
                    let c = tl.cols();
                    let gv = g.item();
                    let gl = slot(grads, *logits, tl.shape());
                    for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == S::zero() {
                            continue;
                        }
                        let row = tl.row(r);
                        let lse = log_sum_exp(row);
                        let coef = gv * w / *norm;
                        let out = &mut gl.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += coef * (row[j] - lse).exp();
                        }
                        out[y] -= coef;
                    }
                }
            }
            Op::NegEntropy { p } => {
                if self.needs_grad(*p) {
                    let tp = self.value(*p);
                    let mean = column_mean(tp);
                    let inv_rows = S::one() / S::of(tp.rows() as f64);
                    let gv = g.item();
                    let coef: Vec<S> = mean
                        .iter()
                        .map(|&m| if m > S::zero() { gv * (m.ln() + S::one()) * inv_rows } else { S::zero() })
                        .collect();
                    let gp = slot(grads, *p, tp.shape());
                    for row in gp.data_mut().chunks_mut(coef.len()) {
                        axpy(S::one(), &coef, row);
                    }
                }
            }
        }
    }
}

fn slot<'a, S: Scalar>(grads: &'a mut [Option<Tensor<S>>], v: Var, shape: &[usize]) -> &'a mut Tensor<S> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for &x in row {
        s += (x - max).exp();
    }
    max + s.ln()
}

fn column_mean<S: Scalar>(t: &Tensor<S>) -> Vec<S> {
    let c = t.cols();
    let mut mean = vec![S::zero(); c];
    for r in 0..t.rows() {
        axpy(S::one(), t.row(r), &mut mean);
    }
    let inv = S::one() / S::of(t.rows() as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// In-place pairwise rotation; `inverse` rotates by the negated angle.
pub(crate) fn rotate_rows<S: Scalar>(data: &mut [S], cols: usize, head_dim: usize, table: &RotationTable<S>, inverse: bool) {
    let pairs = head_dim / 2;
    for r in 0..table.rows {
        let cos = &table.cos[r * pairs..(r + 1) * pairs];
        let sin = &table.sin[r * pairs..(r + 1) * pairs];
        let row = &mut data[r * cols..(r + 1) * cols];
        for head in row.chunks_mut(head_dim) {
            for i in 0..pairs {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::Rotate { .. } => "rotate",
        Op::Softmax { .. } => "softmax_masked",
        Op::AttnProbs { .. } => "attn_probs",
        Op::AttnApply { .. } => "attn_apply",
        Op::Embedding { .. } => "embedding",
        Op::WeightedXent { .. } => "weighted_xent",
        Op::NegEntropy { .. } => "neg_entropy_of_mean",
    }
}

/// Forward rotation of a row-major block, shared with the eager RoPE path.
pub fn graph_rotate<S: Scalar>(data: &mut [S], cols: usize, head_dim: usize, table: &RotationTable<S>) {
    rotate_rows(data, cols, head_dim, table, false);
}
