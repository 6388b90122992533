//! One PreLN transformer layer applied to one block, with optional FAM.

use crate::attention::{block_mask, AttentionMask, BlockGeometry, KvBlock};
use crate::error::{shape_err, Error, Result};
use crate::model::state::{FamSlot, LayerState};
use crate::model::ModelConfig;
use crate::numerics::{Graph, ParamId, Scalar, Tensor, Var};
use crate::rope::{fam_positions_ending, rotation_table, PositionIds};

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// A layer's parameters placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub(crate) struct BlockStep {
    pub out: Var,
    pub probs: Var,
    pub pushed_kv: bool,
    pub pushed_fam: bool,
}

fn rotate<S: Scalar>(g: &mut Graph<S>, cfg: &ModelConfig, x: Var, positions: &[i64], offset: f64) -> Result<Var> {
    let pos = PositionIds { positions: positions.to_vec(), offset };
    g.rotate(x, rotation_table(&pos, &cfg.rope), cfg.head_dim())
}

/// `FF(PreLN(a)) + a`
fn feed_forward<S: Scalar>(g: &mut Graph<S>, cfg: &ModelConfig, lv: &LayerVars, a: Var) -> Result<Var> {
    let h = g.layer_norm(a, lv.ln2_gain, lv.ln2_bias, S::of(cfg.ln_eps))?;
    let z = g.matmul(h, lv.w1)?;
    let z = g.add_bias(z, lv.b1)?;
    let z = g.gelu(z)?;
    let z = g.matmul(z, lv.w2)?;
    let z = g.add_bias(z, lv.b2)?;
    g.add(z, a)
}

fn scale<S: Scalar>(cfg: &ModelConfig) -> S {
    S::of(1.0 / (cfg.head_dim() as f64).sqrt())
}

/// Processes one block through one layer.
///
/// With FAM, the block input and the previous FAM are stacked as
/// `[I_τ ‖ F_{τ-1}]` and share a single projection and attention call; keys
/// are ordered `[memory ‖ older FAMs ‖ previous FAM ‖ current block]`. The
/// layer's state gains this block's keys/values and the updated FAM.
pub(crate) fn layer_block<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    lv: &LayerVars,
    state: &mut LayerState<Var>,
    input: Var,
    positions: &[i64],
    offset: f64,
) -> Result<BlockStep> {
    let cur = g.value(input).rows();
    let d = cfg.d_model;
    if cur == 0 || cur > cfg.layout.block_size || positions.len() != cur {
        return shape_err("layer_block", format!("block of {cur} rows with {} positions, block size {}", positions.len(), cfg.layout.block_size));
    }
    if g.value(input).cols() != d {
        return shape_err("layer_block", format!("input width {} != d_model {d}", g.value(input).cols()));
    }
    let f = cfg.fam_len();
    let fam: Option<FamSlot<Var>> = state.fam.clone();
    match (&fam, f) {
        (None, f) if f > 0 => return Err(Error::StateMismatch("FAM layer called before its FAM was seeded".into())),
        (Some(_), 0) => return Err(Error::StateMismatch("FAM present on a layer without FAM".into())),
        (Some(slot), f) if g.value(slot.fam).shape() != [f, d] => {
            return Err(Error::StateMismatch(format!("FAM shape {:?}, expected [{f}, {d}]", g.value(slot.fam).shape())))
        }
        _ => {}
    }

    let x = match &fam {
        Some(slot) => g.concat_rows(&[input, slot.fam])?,
        None => input,
    };
    let h = g.layer_norm(x, lv.ln1_gain, lv.ln1_bias, S::of(cfg.ln_eps))?;
    let q = g.matmul(h, lv.wq)?;
    let k = g.matmul(h, lv.wk)?;
    let v = g.matmul(h, lv.wv)?;
    let mut row_pos = positions.to_vec();
    if let Some(slot) = &fam {
        row_pos.extend_from_slice(&slot.positions);
    }
    let qr = rotate(g, cfg, q, &row_pos, offset)?;
    let kr = rotate(g, cfg, k, &row_pos, offset)?;

    let mut key_parts = Vec::new();
    let mut val_parts = Vec::new();
    let mut key_pos: Vec<i64> = Vec::new();
    let memory: Vec<KvBlock<Var>> = state.kv.iter().cloned().collect();
    for blk in &memory {
        let (kk, vv) = if cfg.stop_grad_memory {
            (g.detach(blk.keys)?, g.detach(blk.values)?)
        } else {
            (blk.keys, blk.values)
        };
        key_parts.push(rotate(g, cfg, kk, &blk.positions, offset)?);
        val_parts.push(vv);
        key_pos.extend_from_slice(&blk.positions);
    }
    let mem_keys = key_pos.len();
    let older: Vec<KvBlock<Var>> = state.older_fams.iter().cloned().collect();
    for blk in &older {
        key_parts.push(rotate(g, cfg, blk.keys, &blk.positions, offset)?);
        val_parts.push(blk.values);
        key_pos.extend_from_slice(&blk.positions);
    }
    if let Some(slot) = &fam {
        key_parts.push(g.slice_rows(kr, cur, cur + f)?);
        val_parts.push(g.slice_rows(v, cur, cur + f)?);
        key_pos.extend_from_slice(&slot.positions);
    }
    let fam_keys = key_pos.len() - mem_keys;
    if fam.is_some() {
        key_parts.push(g.slice_rows(kr, 0, cur)?);
        val_parts.push(g.slice_rows(v, 0, cur)?);
    } else {
        key_parts.push(kr);
        val_parts.push(v);
    }
    key_pos.extend_from_slice(positions);

    let geom = BlockGeometry {
        mem_keys,
        fam_keys,
        prev_fam_keys: if fam.is_some() { f } else { 0 },
        cur_len: cur,
        fam_queries: if fam.is_some() { f } else { 0 },
    };
    let mask = block_mask(&geom, cfg.layout.xl_window, |t, c| positions[t] - key_pos[c]);
    let keys = g.concat_rows(&key_parts)?;
    let values = g.concat_rows(&val_parts)?;
    let probs = g.attn_probs(qr, keys, &mask, cfg.num_heads, scale(cfg))?;
    let att = g.attn_apply(probs, values, cfg.num_heads)?;
    let proj = g.matmul(att, lv.wo)?;

    let residual = match &fam {
        Some(slot) => {
            let r = if slot.fresh { g.constant(Tensor::zeros(&[f, d]))? } else { slot.fam };
            g.concat_rows(&[input, r])?
        }
        None => input,
    };
    let a = g.add(proj, residual)?;
    let o = feed_forward(g, cfg, lv, a)?;

    let pushed_kv = state.kv.capacity() > 0;
    let mut pushed_fam = false;
    let out = match &fam {
        Some(slot) => {
            let out = g.slice_rows(o, 0, cur)?;
            let new_fam = g.slice_rows(o, cur, cur + f)?;
            if state.older_fams.capacity() > 0 {
                let keys = g.slice_rows(k, cur, cur + f)?;
                let values = g.slice_rows(v, cur, cur + f)?;
                state.older_fams.push(KvBlock { keys, values, positions: slot.positions.clone() });
                pushed_fam = true;
            }
            if pushed_kv {
                let keys = g.slice_rows(k, 0, cur)?;
                let values = g.slice_rows(v, 0, cur)?;
                state.kv.push(KvBlock { keys, values, positions: positions.to_vec() });
            }
            let last = *positions.last().expect("non-empty block");
            state.fam = Some(FamSlot { fam: new_fam, positions: fam_positions_ending(last, f).positions, fresh: false });
            out
        }
        None => {
            if pushed_kv {
                state.kv.push(KvBlock { keys: k, values: v, positions: positions.to_vec() });
            }
            o
        }
    };
    Ok(BlockStep { out, probs, pushed_kv, pushed_fam })
}

/// Runs the FAM prompt through one layer: full attention among its rows,
/// ordinary residuals. Produces the next layer's initial FAM.
pub(crate) fn prompt_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    lv: &LayerVars,
    prompt: Var,
    positions: &[i64],
    offset: f64,
) -> Result<Var> {
    let f = g.value(prompt).rows();
    let h = g.layer_norm(prompt, lv.ln1_gain, lv.ln1_bias, S::of(cfg.ln_eps))?;
    let q = g.matmul(h, lv.wq)?;
    let k = g.matmul(h, lv.wk)?;
    let v = g.matmul(h, lv.wv)?;
    let qr = rotate(g, cfg, q, positions, offset)?;
    let kr = rotate(g, cfg, k, positions, offset)?;
    let probs = g.attn_probs(qr, kr, &AttentionMask::full(f, f), cfg.num_heads, scale(cfg))?;
    let att = g.attn_apply(probs, v, cfg.num_heads)?;
    let proj = g.matmul(att, lv.wo)?;
    let a = g.add(proj, prompt)?;
    feed_forward(g, cfg, lv, a)
}
