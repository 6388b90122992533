mod common;

use common::*;
use fam_core::attention::BlockLayout;
use fam_core::model::{layer_forward_bswa, layer_forward_fam, LayerState, Model, ModelConfig};
use fam_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomized(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut model = Model::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for p in model.params_mut().iter_mut() {
        for x in p.value.data_mut() {
            *x = rng.gen_range(-0.6..0.6);
        }
    }
    model
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn hyper(cfg: &ModelConfig) -> Hyper {
    Hyper { heads: cfg.num_heads, rope_base: cfg.rope.base_frequency, eps: cfg.ln_eps }
}

fn run_fam_blocks(b: usize, m: usize, f: usize, blocks: usize, seed: u64) -> f64 {
    let cfg = ModelConfig::new(1, 8, 2, 16, BlockLayout::new(b, m, f).unwrap()).unwrap();
    let model = randomized(cfg.clone(), seed);
    let w = layer_weights(&model, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fam = rand_mat(&mut rng, f, 8);
    let mut fam_pos: Vec<i64> = (-(f as i64)..0).collect();
    let mut state: LayerState<Tensor<f64>> = LayerState::new(&cfg);
    state.seed_fam(from_mat(&fam), fam_pos.clone(), true);
    let mut memory: Vec<MemBlock> = Vec::new();
    let mut worst = 0.0f64;
    for tau in 0..blocks {
        let input = rand_mat(&mut rng, b, 8);
        let positions: Vec<i64> = (0..b as i64).map(|i| tau as i64 * b as i64 + i).collect();
        let pf: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
        let ff: Vec<f64> = fam_pos.iter().map(|&p| p as f64).collect();
        let want = fam_layer_reference(&input, &fam, &memory, &w, hyper(&cfg), &pf, &ff, tau == 0);
        let got = layer_forward_fam(&model, 0, &from_mat(&input), &mut state, &positions).unwrap();
        worst = worst.max(max_abs_diff(&to_mat(&got), &want.o));
        worst = worst.max(max_abs_diff(&to_mat(&state.fam.as_ref().unwrap().fam), &want.f));
        memory.push(want.kv);
        if memory.len() > m {
            memory.remove(0);
        }
        fam = want.f;
        let last = *positions.last().unwrap();
        fam_pos = (last - f as i64 + 1..=last).collect();
        assert_eq!(state.fam.as_ref().unwrap().positions, fam_pos);
    }
    worst
}

#[test]
fn fam_layer_matches_straight_line_transcription() {
    for seed in 0..100 {
        let err = run_fam_blocks(2, 0, 1, 1, seed);
        assert!(err <= 1e-10, "seed {seed}: {err}");
    }
}

#[test]
fn fam_layer_matches_over_several_blocks_with_memory() {
    for (b, m, f) in [(2, 1, 1), (3, 2, 2), (4, 1, 4)] {
        let err = run_fam_blocks(b, m, f, 5, 7);
        assert!(err <= 1e-10, "b={b} m={m} f={f}: {err}");
    }
}

#[test]
fn fam_layer_shapes() {
    let cfg = ModelConfig::new(1, 8, 2, 16, BlockLayout::new(4, 1, 2).unwrap()).unwrap();
    let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let mut state = LayerState::new(&cfg);
    state.seed_fam(Tensor::zeros(&[2, 8]), vec![-2, -1], true);
    let out = layer_forward_fam(&model, 0, &Tensor::zeros(&[4, 8]), &mut state, &[0, 1, 2, 3]).unwrap();
    assert_eq!(out.shape(), [4, 8]);
    assert_eq!(state.fam.unwrap().fam.shape(), [2, 8]);
}

#[test]
fn bswa_single_block_is_full_causal_layer() {
    // One block, no memory: the layer is an ordinary causal layer.
    let cfg = ModelConfig::new(1, 8, 2, 16, BlockLayout::new(5, 0, 0).unwrap()).unwrap();
    let model = randomized(cfg.clone(), 3);
    let w = layer_weights(&model, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = rand_mat(&mut rng, 5, 8);
    let mut state = LayerState::new(&cfg);
    let got = layer_forward_bswa(&model, 0, &from_mat(&input), &mut state, &[0, 1, 2, 3, 4]).unwrap();
    let pos: Vec<f64> = (0..5).map(|p| p as f64).collect();
    let h = layer_norm(&input, &w.ln1_gain, &w.ln1_bias, cfg.ln_eps);
    let q = rope(&matmul(&h, &w.wq), &pos, 4, cfg.rope.base_frequency);
    let k = rope(&matmul(&h, &w.wk), &pos, 4, cfg.rope.base_frequency);
    let v = matmul(&h, &w.wv);
    let mut att = vec![vec![0.0; 8]; 5];
    for head in 0..2 {
        let cols = |x: &Mat| -> Mat { x.iter().map(|r| r[head * 4..head * 4 + 4].to_vec()).collect() };
        let o = naive_full_attention(&cols(&q), &cols(&k), &cols(&v), true);
        for (r, row) in o.iter().enumerate() {
            att[r][head * 4..head * 4 + 4].copy_from_slice(row);
        }
    }
    let a: Mat = matmul(&att, &w.wo).iter().zip(&input).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
    let h2 = layer_norm(&a, &w.ln2_gain, &w.ln2_bias, cfg.ln_eps);
    let z: Mat = matmul(&h2, &w.w1).iter().map(|r| r.iter().zip(&w.b1).map(|(x, b)| gelu(x + b)).collect()).collect();
    let o: Mat = matmul(&z, &w.w2)
        .iter()
        .zip(&a)
        .map(|(r, ar)| r.iter().zip(&w.b2).zip(ar).map(|((x, b), y)| x + b + y).collect())
        .collect();
    assert!(max_abs_diff(&to_mat(&got), &o) <= 1e-10);
}

#[test]
fn fam_off_routes_to_bswa_error() {
    let cfg = ModelConfig::new(1, 8, 2, 16, BlockLayout::new(2, 1, 0).unwrap()).unwrap();
    let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let mut state = LayerState::new(&cfg);
    assert!(layer_forward_fam(&model, 0, &Tensor::zeros(&[2, 8]), &mut state, &[0, 1]).is_err());
}

#[test]
fn full_model_with_unbounded_memory_equals_causal_reference() {
    let cfg = ModelConfig::new(2, 8, 2, 16, BlockLayout::new(2, 8, 0).unwrap()).unwrap();
    let model = randomized(cfg, 11);
    let tokens: Vec<u32> = (0..12).map(|i| (i * 7 % 16) as u32).collect();
    let got = model.forward_logits(&tokens, fam_core::model::ForwardMode::Train).unwrap();
    let want = full_causal_reference(&model, &tokens);
    assert!(max_abs_diff(&to_mat(&got), &want) <= 1e-10);
}
