//! Mask construction, masked attention and the key/value ring buffer.

mod attend;
mod mask;
mod ring;

pub use attend::attend;
pub use mask::{block_mask, build_bswa_mask, build_fam_block_mask, AttentionMask, BlockGeometry, BlockLayout, Role};
pub use ring::{KvBlock, KvRing, Overwrite};
