use crate::attention::BlockLayout;
use crate::config_text::KvText;
use crate::error::{Error, Result};
use crate::rope::RopeConfig;

/// Architecture of a BSWA (`fam_len == 0`) or FAM transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ff_multiplier: usize,
    pub vocab_size: usize,
    pub layout: BlockLayout,
    pub rope: RopeConfig,
    /// Block gradients into keys/values cached from earlier blocks.
    pub stop_grad_memory: bool,
    /// How many previous FAM key sets input queries may attend to.
    pub num_fam_blocks: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        d_model: usize,
        num_heads: usize,
        vocab_size: usize,
        layout: BlockLayout,
    ) -> Result<Self> {
        if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {num_heads} heads")));
        }
        let cfg = Self {
            num_layers,
            d_model,
            num_heads,
            ff_multiplier: 4,
            vocab_size,
            layout,
            rope: RopeConfig::new(10000.0, d_model / num_heads)?,
            stop_grad_memory: false,
            num_fam_blocks: 1,
            ln_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.ff_multiplier == 0 {
            return Err(Error::Config("layers, d_model, vocab and ff multiplier must be positive".into()));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.rope.head_dim != self.head_dim() {
            return Err(Error::Config(format!(
                "RoPE head_dim {} differs from d_model/num_heads {}",
                self.rope.head_dim,
                self.head_dim()
            )));
        }
        if self.num_fam_blocks == 0 {
            return Err(Error::Config("num_fam_blocks must be at least 1".into()));
        }
        self.layout.validate()?;
        RopeConfig::new(self.rope.base_frequency, self.rope.head_dim)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn ff_hidden(&self) -> usize {
        self.ff_multiplier * self.d_model
    }

    pub fn fam_len(&self) -> usize {
        self.layout.fam_len
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("num_layers", self.num_layers);
        kv.set("d_model", self.d_model);
        kv.set("num_heads", self.num_heads);
        kv.set("ff_multiplier", self.ff_multiplier);
        kv.set("vocab_size", self.vocab_size);
        kv.set("block_size", self.layout.block_size);
        kv.set("memory_segments", self.layout.memory_segments);
        kv.set("fam_len", self.layout.fam_len);
        kv.set("xl_window", self.layout.xl_window.map_or_else(|| "-".to_string(), |w| w.to_string()));
        kv.set("rope_base", self.rope.base_frequency);
        kv.set("stop_grad_memory", self.stop_grad_memory);
        kv.set("num_fam_blocks", self.num_fam_blocks);
        kv.set("ln_eps", self.ln_eps);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        let xl_window = match kv.get("xl_window") {
            None | Some("-") => None,
            Some(w) => Some(w.parse().map_err(|_| Error::Config(format!("invalid xl_window {w:?}")))?),
        };
        let layout = BlockLayout {
            block_size: kv.require("block_size")?,
            memory_segments: kv.require("memory_segments")?,
            fam_len: kv.require("fam_len")?,
            xl_window,
        };
        let d_model: usize = kv.require("d_model")?;
        let num_heads: usize = kv.require("num_heads")?;
        if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {num_heads} heads")));
        }
        let cfg = Self {
            num_layers: kv.require("num_layers")?,
            d_model,
            num_heads,
            ff_multiplier: kv.require("ff_multiplier")?,
            vocab_size: kv.require("vocab_size")?,
            layout,
            rope: RopeConfig::new(kv.require("rope_base")?, d_model / num_heads)?,
            stop_grad_memory: kv.require("stop_grad_memory")?,
            num_fam_blocks: kv.require("num_fam_blocks")?,
            ln_eps: kv.require("ln_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exact number of learnable scalars for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let h = cfg.ff_hidden();
    let v = cfg.vocab_size;
    let per_layer = 2 * d + 4 * d * d + 2 * d + d * h + h + h * d + d;
    v * d + cfg.num_layers * per_layer + 2 * d + d * v + v + cfg.fam_len() * d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, fam: usize) -> ModelConfig {
        ModelConfig::new(layers, 64, 4, 50, BlockLayout::new(16, 1, fam).unwrap()).unwrap()
    }

    #[test]
    fn fam_adds_f_times_d() {
        assert_eq!(param_count(&cfg(2, 4)) - param_count(&cfg(2, 0)), 4 * 64);
    }

    #[test]
    fn layer_params_scale_with_depth() {
        let base = param_count(&cfg(1, 0));
        let two = param_count(&cfg(2, 0));
        let four = param_count(&cfg(4, 0));
        assert_eq!(four - two, 2 * (two - base));
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = cfg(2, 4);
        c.layout = c.layout.with_xl_window(8).unwrap();
        c.stop_grad_memory = true;
        assert_eq!(ModelConfig::from_kv(&KvText::parse(&c.to_kv().to_canonical()).unwrap()).unwrap(), c);
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(ModelConfig::new(1, 10, 3, 8, BlockLayout::new(4, 1, 0).unwrap()).is_err());
    }
}
