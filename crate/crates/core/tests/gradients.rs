mod common;

use fam_core::attention::BlockLayout;
use fam_core::model::{ForwardOptions, Model, ModelConfig};
use fam_core::numerics::grad_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_fam(seed: u64) -> Model<f64> {
    let cfg = ModelConfig::new(2, 8, 2, 16, BlockLayout::new(2, 1, 1).unwrap()).unwrap();
    Model::new(cfg, seed).unwrap()
}

#[test]
fn full_fam_model_gradients_match_finite_differences() {
    let model = tiny_fam(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens: Vec<u32> = (0..7).map(|_| rng.gen_range(0..16)).collect();
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let weights = vec![1.0f64; 6];
    let mut params = model.params().clone();
    let report = grad_check(&mut params, 1e-5, |store, g| {
        let mv = model.bind_from(store, g)?;
        let trace = model.forward_graph(g, &mv, &tokens[..6], &ForwardOptions::default())?;
        g.weighted_xent(trace.logits, &targets, &weights, 6.0)
    })
    .unwrap();
    for (name, err) in &report.per_param {
        println!("{name}: {err:e}");
    }
    assert!(report.max_relative_error <= 1e-5, "{:?}", report.worst);
}
