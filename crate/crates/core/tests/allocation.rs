//! Heap accounting for the streaming path. A counting global allocator makes
//! this its own test binary, and everything runs inside one test so the
//! harness has no other thread allocating meanwhile.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use fam_core::attention::{BlockLayout, KvBlock, KvRing};
use fam_core::model::{Model, ModelConfig};
use fam_core::Tensor;

struct Counting;

static ALLOCS: AtomicUsize = AtomicUsize::new(0);
static LIVE: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        ALLOCS.fetch_add(1, Ordering::Relaxed);
        LIVE.fetch_add(layout.size(), Ordering::Relaxed);
        System.alloc(layout)
    }
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn block(seed: f32) -> KvBlock<Tensor<f32>> {
    KvBlock { keys: Tensor::full(&[4, 8], seed), values: Tensor::full(&[4, 8], -seed), positions: vec![0, 1, 2, 3] }
}

fn full_ring_push_copy_never_allocates() {
    let mut ring = KvRing::new(3);
    let src = block(1.0);
    for _ in 0..3 {
        ring.push_copy(&src);
    }
    let before = ALLOCS.load(Ordering::Relaxed);
    for i in 0..100 {
        let mut b = ring.newest().unwrap().clone();
        b.keys.data_mut()[0] = i as f32;
        let mark = ALLOCS.load(Ordering::Relaxed);
        ring.push_copy(&b);
        assert_eq!(ALLOCS.load(Ordering::Relaxed), mark, "push {i} allocated");
    }
    assert!(ALLOCS.load(Ordering::Relaxed) > before, "the clones above must be counted");
    assert_eq!(ring.newest().unwrap().keys.data()[0], 99.0);
}

fn streaming_live_heap_is_flat() {
    for fam in [0, 2] {
        let cfg = ModelConfig::new(2, 16, 2, 32, BlockLayout::new(4, 2, fam).unwrap()).unwrap();
        let model: Model<f32> = Model::new(cfg, 3).unwrap();
        let mut session = model.stream();
        let tokens = [1u32, 5, 9, 13];
        let mut baseline = None;
        for step in 0..60 {
            drop(session.feed_block(&tokens).unwrap());
            let live = LIVE.load(Ordering::Relaxed);
            if step == 5 {
                baseline = Some((live, session.resident_bytes()));
            } else if let Some((l, r)) = baseline {
                assert_eq!(live, l, "fam={fam} block {step}");
                assert_eq!(session.resident_bytes(), r);
            }
        }
    }
}

#[test]
fn streaming_path_heap_accounting() {
    full_ring_push_copy_never_allocates();
    streaming_live_heap_is_flat();
}
