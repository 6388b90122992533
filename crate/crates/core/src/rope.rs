//! Rotary position embeddings, FAM position assignment and random position offsets.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{graph_rotate, RotationTable, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    pub base_frequency: f64,
    pub head_dim: usize,
}

impl RopeConfig {
    pub fn new(base_frequency: f64, head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("RoPE head_dim must be even and positive, got {head_dim}")));
        }
        if !(base_frequency > 0.0) {
            return Err(Error::Config(format!("RoPE base frequency must be positive, got {base_frequency}")));
        }
        Ok(Self { base_frequency, head_dim })
    }

    /// Longest wavelength of the rotation, in tokens: `2π · base`.
    pub fn max_wavelength(&self) -> f64 {
        2.0 * PI * self.base_frequency
    }

    /// `base^(-2i / head_dim)`.
    pub fn theta(&self, i: usize) -> f64 {
        self.base_frequency.powf(-2.0 * i as f64 / self.head_dim as f64)
    }
}

/// Integer token positions plus a real-valued offset shared by all of them.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionIds {
    pub positions: Vec<i64>,
    pub offset: f64,
}

impl PositionIds {
    pub fn new(positions: Vec<i64>) -> Self {
        Self { positions, offset: 0.0 }
    }

    /// `start, start+1, …, start+len-1`.
    pub fn range(start: i64, len: usize) -> Self {
        Self::new((start..start + len as i64).collect())
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn absolute(&self, i: usize) -> f64 {
        self.positions[i] as f64 + self.offset
    }

    pub fn concat(parts: &[&PositionIds]) -> Self {
        let offset = parts.first().map_or(0.0, |p| p.offset);
        Self { positions: parts.iter().flat_map(|p| p.positions.iter().copied()).collect(), offset }
    }
}

/// Rotation table for rows at `pos`; angles are formed in `f64`.
pub fn rotation_table<S: Scalar>(pos: &PositionIds, cfg: &RopeConfig) -> RotationTable<S> {
    let pairs = cfg.head_dim / 2;
    let thetas: Vec<f64> = (0..pairs).map(|i| cfg.theta(i)).collect();
    let mut cos = Vec::with_capacity(pos.len() * pairs);
    let mut sin = Vec::with_capacity(pos.len() * pairs);
    for r in 0..pos.len() {
        let p = pos.absolute(r);
        for &t in &thetas {
            let (s, c) = (p * t).sin_cos();
            cos.push(S::of(c));
            sin.push(S::of(s));
        }
    }
    RotationTable { rows: pos.len(), pairs, cos, sin }
}

/// Rotates each `(x₂ᵢ, x₂ᵢ₊₁)` pair of every head by `(position + offset)·θᵢ`.
///
/// `x` is `…×seq×width` with `width` a multiple of `head_dim`; leading axes are
/// treated as independent sequences sharing `pos`.
pub fn rope_rotate<S: Scalar>(x: &Tensor<S>, pos: &PositionIds, cfg: &RopeConfig) -> Result<Tensor<S>> {
    if !cfg.head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!("odd head_dim {}", cfg.head_dim)));
    }
    if x.shape().len() < 2 || !x.cols().is_multiple_of(cfg.head_dim) {
        return shape_err("rope_rotate", format!("{:?} with head_dim {}", x.shape(), cfg.head_dim));
    }
    let seq = x.shape()[x.shape().len() - 2];
    if seq != pos.len() {
        return shape_err("rope_rotate", format!("{} positions for sequence of {seq}", pos.len()));
    }
    let table = rotation_table::<S>(pos, cfg);
    let mut out = x.clone();
    let width = x.cols();
    for chunk in out.data_mut().chunks_mut(seq * width) {
        graph_rotate(chunk, width, cfg.head_dim, &table);
    }
    out.ensure_finite("rope_rotate")?;
    Ok(out)
}

/// Positions stamped on a FAM that compressed the block starting at
/// `block_start`: the last `fam_len` positions of that block, in order.
pub fn fam_positions(block_start: i64, block_size: usize, fam_len: usize) -> Result<PositionIds> {
    if fam_len == 0 || fam_len > block_size {
        return Err(Error::Config(format!("FAM length {fam_len} must lie in 1..={block_size}")));
    }
    Ok(fam_positions_ending(block_start + block_size as i64 - 1, fam_len))
}

/// The `fam_len` positions ending at `last`.
pub fn fam_positions_ending(last: i64, fam_len: usize) -> PositionIds {
    PositionIds::range(last - fam_len as i64 + 1, fam_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Inference,
}

/// Random position offset: zero with probability ½, otherwise uniform on
/// `[0, max_wavelength)`. Always zero at inference.
pub fn sample_rpo<R: Rng + ?Sized>(cfg: &RopeConfig, phase: Phase, rng: &mut R) -> f64 {
    if phase == Phase::Inference {
        return 0.0;
    }
    let offset = rng.gen_range(0.0..cfg.max_wavelength());
    let keep: f64 = rng.gen::<f64>().round();
    offset * keep
}
