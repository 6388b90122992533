//! Fixtures shared by the benchmarks.

use fam_core::attention::BlockLayout;
use fam_core::model::{Model, ModelConfig};
use fam_core::tasks::VOCAB_SIZE;

/// The desk-scale PassKey shape: 2 layers, d=64, 4 heads, b=16, m=1.
pub fn desk_model(fam_len: usize) -> Model<f32> {
    let layout = BlockLayout::new(16, 1, fam_len).expect("valid layout");
    let cfg = ModelConfig::new(2, 64, 4, VOCAB_SIZE, layout).expect("valid config");
    Model::new(cfg, 0).expect("model builds")
}
