//! Block sliding window attention (BSWA) and feedback attention memory (FAM)
//! transformers on a small tape-based autodiff engine.

pub mod attention;
pub mod checkpoint;
pub mod config_text;
pub mod error;
pub mod model;
pub mod numerics;
pub mod rope;
pub mod tasks;
pub mod training;

pub use attention::{AttentionMask, BlockLayout, KvRing};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, StreamSession};
pub use numerics::{Graph, ParamStore, Scalar, Tensor, Var};
pub use rope::{PositionIds, RopeConfig};
pub use checkpoint::Checkpoint;
pub use tasks::{PackedExample, ToyVocab};
pub use training::{train_step, Adam, SavedFamStore, TrainConfig};
