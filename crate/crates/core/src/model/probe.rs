use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::numerics::{grad_check, GradCheckReport, Graph, Scalar};

/// L1 norm of the gradient of the mean last-block output with respect to
/// the token embeddings of the block `k` blocks earlier.
pub fn receptive_field_probe<S: Scalar>(model: &Model<S>, tokens: &[u32], k: usize) -> Result<f64> {
    let mut g = Graph::new();
    let mv = model.bind(&mut g)?;
    let trace = model.forward_graph(&mut g, &mv, tokens, &ForwardOptions::default())?;
    let last = trace.block_outputs.len() - 1;
    if k > last {
        return Err(Error::Config(format!("probe distance {k} exceeds {last} earlier blocks")));
    }
    let loss = g.mean(trace.block_outputs[last])?;
    let grads = g.backward(loss)?;
    Ok(grads.get(trace.block_inputs[last - k]).map_or(0.0, |t| t.l1_norm()))
}

/// Central-difference check of the next-token loss on `tokens` (unit
/// weights) against backprop, for every parameter of `model`.
pub fn lm_grad_check(model: &Model<f64>, tokens: &[u32], h: f64) -> Result<GradCheckReport> {
    if tokens.len() < 2 {
        return Err(Error::Config("grad check needs at least two tokens".into()));
    }
    let n = tokens.len() - 1;
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let weights = vec![1.0; n];
    let mut params = model.params().clone();
    grad_check(&mut params, h, |store, g| {
        let mv = model.bind_from(store, g)?;
        let trace = model.forward_graph(g, &mv, &tokens[..n], &ForwardOptions::default())?;
        g.weighted_xent(trace.logits, &targets, &weights, n as f64)
    })
}
