//! Per-layer streaming state: the key/value ring and the current FAM.

use crate::attention::{KvBlock, KvRing, Overwrite};
use crate::model::ModelConfig;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::error::Result;

/// FAM activations of one layer with the positions they were stamped with.
#[derive(Clone, Debug)]
pub struct FamSlot<T> {
    pub fam: T,
    pub positions: Vec<i64>,
    /// Seeded from the learned initial FAM and not yet updated. The first
    /// update of such a FAM uses a zero residual.
    pub fresh: bool,
}

/// Everything one layer carries from block to block. Its size does not
/// depend on how many tokens have been processed.
#[derive(Clone, Debug)]
pub struct LayerState<T> {
    pub kv: KvRing<KvBlock<T>>,
    pub fam: Option<FamSlot<T>>,
    /// Keys/values of FAMs older than the current one (capacity `num_fam_blocks - 1`).
    pub older_fams: KvRing<KvBlock<T>>,
}

impl<T> LayerState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            kv: KvRing::new(cfg.layout.memory_segments),
            fam: None,
            older_fams: KvRing::new(if cfg.fam_len() > 0 { cfg.num_fam_blocks - 1 } else { 0 }),
        }
    }

    pub fn seed_fam(&mut self, fam: T, positions: Vec<i64>, fresh: bool) {
        self.fam = Some(FamSlot { fam, positions, fresh });
    }
}

impl<S: Scalar> LayerState<Tensor<S>> {
    /// Bytes held by the state's buffers.
    pub fn resident_bytes(&self) -> usize {
        self.kv.resident_bytes()
            + self.older_fams.resident_bytes()
            + self.fam.as_ref().map_or(0, |f| f.fam.byte_size() + f.positions.capacity() * 8)
    }

    /// Places the state on `g` as constants.
    pub(crate) fn to_graph(&self, g: &mut Graph<S>) -> Result<LayerState<Var>> {
        let lift = |g: &mut Graph<S>, b: &KvBlock<Tensor<S>>| -> Result<KvBlock<Var>> {
            Ok(KvBlock { keys: g.constant(b.keys.clone())?, values: g.constant(b.values.clone())?, positions: b.positions.clone() })
        };
        let mut kv = KvRing::new(self.kv.capacity());
        for b in self.kv.iter() {
            kv.push(lift(g, b)?);
        }
        let mut older_fams = KvRing::new(self.older_fams.capacity());
        for b in self.older_fams.iter() {
            older_fams.push(lift(g, b)?);
        }
        let fam = match &self.fam {
            Some(f) => Some(FamSlot { fam: g.constant(f.fam.clone())?, positions: f.positions.clone(), fresh: f.fresh }),
            None => None,
        };
        Ok(LayerState { kv, fam, older_fams })
    }

    /// Copies the entries `updated` gained during one block back into `self`
    /// without growing any buffer once the rings are full.
    pub(crate) fn absorb(&mut self, g: &Graph<S>, updated: &LayerState<Var>, pushed_kv: bool, pushed_fam: bool) {
        if pushed_kv {
            if let Some(b) = updated.kv.newest() {
                self.kv.push_block(g.value(b.keys), g.value(b.values), &b.positions);
            }
        }
        if pushed_fam {
            if let Some(b) = updated.older_fams.newest() {
                self.older_fams.push_block(g.value(b.keys), g.value(b.values), &b.positions);
            }
        }
        match (&mut self.fam, &updated.fam) {
            (Some(dst), Some(src)) => {
                dst.fam.overwrite_from(g.value(src.fam));
                dst.positions.clear();
                dst.positions.extend_from_slice(&src.positions);
                dst.fresh = src.fresh;
            }
            (dst @ None, Some(src)) => {
                *dst = Some(FamSlot { fam: g.value(src.fam).clone(), positions: src.positions.clone(), fresh: src.fresh })
            }
            _ => {}
        }
    }
}

