//! PreLN transformer with block sliding window attention and optional
//! feedback attention memory (FAM).

mod config;
mod layer;
mod probe;
mod state;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{param_count, ModelConfig};
pub use layer::LayerVars;
pub use probe::{lm_grad_check, receptive_field_probe};
pub use state::{FamSlot, LayerState};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::rope::fam_positions_ending;
use layer::{layer_block, prompt_forward, LayerIds};

/// Name of the learned initial FAM parameter.
pub const FAM_INIT_PARAM: &str = "fam.init";

#[derive(Clone, Debug)]
struct ModelIds {
    embed: ParamId,
    layers: Vec<LayerIds>,
    final_gain: ParamId,
    final_bias: ParamId,
    head_weight: ParamId,
    head_bias: ParamId,
    fam_init: Option<ParamId>,
}

/// The model's parameters placed on one graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
    pub fam_init: Option<Var>,
}

/// Where a sequence's first FAM comes from.
#[derive(Clone, Debug, Default)]
pub enum FamInit<S> {
    /// The learned prompt embeddings, forwarded through the stack.
    #[default]
    Learned,
    /// Per-layer FAM tensors saved from an earlier sequence.
    Restored(Vec<Tensor<S>>),
}

/// Options for a whole-sequence forward on one graph.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<S> {
    /// Added to every position (random position offset during training).
    pub offset: f64,
    pub init: FamInit<S>,
}

/// Nodes recorded by [`Model::forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `T×vocab` next-token logits.
    pub logits: Var,
    /// Token embeddings of each block (first-layer inputs).
    pub block_inputs: Vec<Var>,
    /// Last-layer outputs of each block, before the final norm.
    pub block_outputs: Vec<Var>,
    /// Attention probabilities, one per (block, layer), block-major.
    pub probs: Vec<Var>,
    /// FAM of every layer after the last block; empty without FAM.
    pub final_fams: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    cfg: ModelConfig,
    params: ParamStore<S>,
    ids: ModelIds,
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    let a = std * 3f64.sqrt();
    Tensor::from_fn(rows, cols, |_, _| S::of(rng.gen_range(-a..a)))
}

impl<S: Scalar> Model<S> {
    /// Fresh model with deterministic initialization from `seed`. The initial
    /// FAM is drawn last so a FAM model and its `fam_len = 0` twin share every
    /// other weight.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, v) = (cfg.d_model, cfg.ff_hidden(), cfg.vocab_size);
        let out_std = 1.0 / ((2 * cfg.num_layers) as f64).sqrt();
        let mut store = ParamStore::new();
        let ones = |n: usize| Tensor::full(&[n], S::one());
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let embed = store.add("embed.weight", uniform(&mut rng, v, d, 1.0))?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let ids = LayerIds {
                ln1_gain: store.add(p("ln1.gain"), ones(d))?,
                ln1_bias: store.add(p("ln1.bias"), zeros(d))?,
                wq: store.add(p("attn.wq"), uniform(&mut rng, d, d, 1.0 / (d as f64).sqrt()))?,
                wk: store.add(p("attn.wk"), uniform(&mut rng, d, d, 1.0 / (d as f64).sqrt()))?,
                wv: store.add(p("attn.wv"), uniform(&mut rng, d, d, 1.0 / (d as f64).sqrt()))?,
                wo: store.add(p("attn.wo"), uniform(&mut rng, d, d, out_std / (d as f64).sqrt()))?,
                ln2_gain: store.add(p("ln2.gain"), ones(d))?,
                ln2_bias: store.add(p("ln2.bias"), zeros(d))?,
                w1: store.add(p("ff.w1"), uniform(&mut rng, d, h, 1.0 / (d as f64).sqrt()))?,
                b1: store.add(p("ff.b1"), zeros(h))?,
                w2: store.add(p("ff.w2"), uniform(&mut rng, h, d, out_std / (h as f64).sqrt()))?,
                b2: store.add(p("ff.b2"), zeros(d))?,
            };
            layers.push(ids);
        }
        let final_gain = store.add("final_ln.gain", ones(d))?;
        let final_bias = store.add("final_ln.bias", zeros(d))?;
        let head_weight = store.add("head.weight", uniform(&mut rng, d, v, 1.0 / (d as f64).sqrt()))?;
        let head_bias = store.add("head.bias", zeros(v))?;
        let fam_init = if cfg.fam_len() > 0 {
            Some(store.add(FAM_INIT_PARAM, uniform(&mut rng, cfg.fam_len(), d, 1.0))?)
        } else {
            None
        };
        let ids = ModelIds { embed, layers, final_gain, final_bias, head_weight, head_bias, fam_init };
        Ok(Self { cfg, params: store, ids })
    }

    /// Rebuilds a model from named tensors, checking every expected name and shape.
    pub fn from_named(cfg: ModelConfig, named: &[(String, Tensor<S>)]) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        for p in model.params.iter_mut() {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn set_stop_grad_memory(&mut self, on: bool) {
        self.cfg.stop_grad_memory = on;
    }

    /// Places every parameter on `g`.
    pub fn bind(&self, g: &mut Graph<S>) -> Result<ModelVars> {
        self.bind_from(&self.params, g)
    }

    /// Like [`Model::bind`] but reads values from `store`, which must share
    /// this model's layout (used for finite-difference perturbations).
    pub fn bind_from(&self, store: &ParamStore<S>, g: &mut Graph<S>) -> Result<ModelVars> {
        if store.len() != self.params.len() {
            return Err(Error::StateMismatch("parameter store does not match model".into()));
        }
        let mut p = |id: ParamId| g.param(store, id);
        let layers = self
            .ids
            .layers
            .iter()
            .map(|l| {
                Ok(LayerVars {
                    ln1_gain: p(l.ln1_gain)?,
                    ln1_bias: p(l.ln1_bias)?,
                    wq: p(l.wq)?,
                    wk: p(l.wk)?,
                    wv: p(l.wv)?,
                    wo: p(l.wo)?,
                    ln2_gain: p(l.ln2_gain)?,
                    ln2_bias: p(l.ln2_bias)?,
                    w1: p(l.w1)?,
                    b1: p(l.b1)?,
                    w2: p(l.w2)?,
                    b2: p(l.b2)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars {
            embed: p(self.ids.embed)?,
            layers,
            final_gain: p(self.ids.final_gain)?,
            final_bias: p(self.ids.final_bias)?,
            head_weight: p(self.ids.head_weight)?,
            head_bias: p(self.ids.head_bias)?,
            fam_init: self.ids.fam_init.map(&mut p).transpose()?,
        })
    }

    pub fn new_states<T>(&self) -> Vec<LayerState<T>> {
        (0..self.cfg.num_layers).map(|_| LayerState::new(&self.cfg)).collect()
    }

    /// Positions of a sequence's first FAM: the slots just before position 0.
    pub fn initial_fam_positions(&self) -> Vec<i64> {
        fam_positions_ending(-1, self.cfg.fam_len()).positions
    }

    /// Seeds every layer's FAM at the start of a sequence. Learned
    /// initialization forwards the FAM prompt through the stack so that each
    /// layer receives the prompt's activations at its own depth.
    pub fn seed_fams(
        &self,
        g: &mut Graph<S>,
        mv: &ModelVars,
        states: &mut [LayerState<Var>],
        init: &FamInit<S>,
        offset: f64,
    ) -> Result<()> {
        let f = self.cfg.fam_len();
        if f == 0 {
            return Ok(());
        }
        let positions = self.initial_fam_positions();
        match init {
            FamInit::Learned => {
                let mut prompt = mv.fam_init.ok_or_else(|| Error::StateMismatch("model has no initial FAM".into()))?;
                let n = states.len();
                for (l, state) in states.iter_mut().enumerate() {
                    state.seed_fam(prompt, positions.clone(), true);
                    if l + 1 < n {
                        prompt = prompt_forward(g, &self.cfg, &mv.layers[l], prompt, &positions, offset)?;
                    }
                }
            }
            FamInit::Restored(fams) => {
                if fams.len() != states.len() {
                    return Err(Error::StateMismatch(format!("{} saved FAMs for {} layers", fams.len(), states.len())));
                }
                for (state, t) in states.iter_mut().zip(fams) {
                    if t.shape() != [f, self.cfg.d_model] {
                        return Err(Error::StateMismatch(format!("saved FAM shape {:?}", t.shape())));
                    }
                    let v = g.constant(t.clone())?;
                    state.seed_fam(v, positions.clone(), false);
                }
            }
        }
        Ok(())
    }

    /// Runs one block of tokens through every layer and the output head.
    /// Returns (embedding, last-layer output, logits, per-layer probs, pushes).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block_step(
        &self,
        g: &mut Graph<S>,
        mv: &ModelVars,
        states: &mut [LayerState<Var>],
        tokens: &[u32],
        start_pos: i64,
        offset: f64,
    ) -> Result<BlockOutcome> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<i64> = (start_pos..start_pos + tokens.len() as i64).collect();
        let input = g.embedding(mv.embed, &ids)?;
        let mut x = input;
        let mut probs = Vec::with_capacity(states.len());
        let mut pushed = Vec::with_capacity(states.len());
        for (lv, state) in mv.layers.iter().zip(states.iter_mut()) {
            let step = layer_block(g, &self.cfg, lv, state, x, &positions, offset)?;
            x = step.out;
            probs.push(step.probs);
            pushed.push((step.pushed_kv, step.pushed_fam));
        }
        let h = g.layer_norm(x, mv.final_gain, mv.final_bias, S::of(self.cfg.ln_eps))?;
        let logits = g.matmul(h, mv.head_weight)?;
        let logits = g.add_bias(logits, mv.head_bias)?;
        Ok(BlockOutcome { input, output: x, logits, probs, pushed })
    }

    /// Whole-sequence forward on one graph, block by block in order.
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        mv: &ModelVars,
        tokens: &[u32],
        opts: &ForwardOptions<S>,
    ) -> Result<ForwardTrace> {
        if tokens.is_empty() {
            return shape_err("forward", "empty token sequence");
        }
        let mut states: Vec<LayerState<Var>> = self.new_states();
        self.seed_fams(g, mv, &mut states, &opts.init, opts.offset)?;
        let b = self.cfg.layout.block_size;
        let mut trace = ForwardTrace {
            logits: mv.embed,
            block_inputs: Vec::new(),
            block_outputs: Vec::new(),
            probs: Vec::new(),
            final_fams: Vec::new(),
        };
        let mut logits = Vec::new();
        for (i, chunk) in tokens.chunks(b).enumerate() {
            let out = self.block_step(g, mv, &mut states, chunk, (i * b) as i64, opts.offset)?;
            trace.block_inputs.push(out.input);
            trace.block_outputs.push(out.output);
            trace.probs.extend(out.probs);
            logits.push(out.logits);
        }
        trace.logits = g.concat_rows(&logits)?;
        trace.final_fams = states.iter().filter_map(|s| s.fam.as_ref().map(|f| f.fam)).collect();
        Ok(trace)
    }

    /// Next-token logits for `tokens`, either on one graph or block-by-block
    /// through a [`StreamSession`].
    pub fn forward_logits(&self, tokens: &[u32], mode: ForwardMode) -> Result<Tensor<S>> {
        match mode {
            ForwardMode::Train => {
                let mut g = Graph::new();
                let mv = self.bind(&mut g)?;
                let trace = self.forward_graph(&mut g, &mv, tokens, &ForwardOptions::default())?;
                Ok(g.value(trace.logits).clone())
            }
            ForwardMode::Stream => {
                let mut session = self.stream();
                let mut parts = Vec::new();
                for chunk in tokens.chunks(self.cfg.layout.block_size) {
                    parts.push(session.feed_block(chunk)?);
                }
                let refs: Vec<&Tensor<S>> = parts.iter().collect();
                Tensor::concat_rows(&refs)
            }
        }
    }

    pub fn stream(&self) -> StreamSession<'_, S> {
        StreamSession::new(self)
    }

    /// Single-layer forward of one block against persisted tensor state.
    /// Routes to the FAM path when the layout has FAM, else to BSWA.
    pub fn layer_forward(
        &self,
        layer: usize,
        input: &Tensor<S>,
        state: &mut LayerState<Tensor<S>>,
        positions: &[i64],
        offset: f64,
    ) -> Result<Tensor<S>> {
        if layer >= self.cfg.num_layers {
            return Err(Error::Config(format!("no layer {layer}")));
        }
        let mut g = Graph::new();
        let mv = self.bind(&mut g)?;
        let mut vstate = state.to_graph(&mut g)?;
        let x = g.constant(input.clone())?;
        let step = layer_block(&mut g, &self.cfg, &mv.layers[layer], &mut vstate, x, positions, offset)?;
        state.absorb(&g, &vstate, step.pushed_kv, step.pushed_fam);
        Ok(g.value(step.out).clone())
    }

    /// Per-layer initial FAM tensors produced by the learned prompt.
    pub fn initial_fams(&self) -> Result<Vec<Tensor<S>>> {
        let mut g = Graph::new();
        let mv = self.bind(&mut g)?;
        let mut states: Vec<LayerState<Var>> = self.new_states();
        self.seed_fams(&mut g, &mv, &mut states, &FamInit::Learned, 0.0)?;
        Ok(states.iter().filter_map(|s| s.fam.as_ref().map(|f| g.value(f.fam).clone())).collect())
    }
}

pub(crate) struct BlockOutcome {
    pub input: Var,
    pub output: Var,
    pub logits: Var,
    pub probs: Vec<Var>,
    pub pushed: Vec<(bool, bool)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Entire sequence on one differentiable graph.
    Train,
    /// Block-at-a-time with persisted O(1) state.
    Stream,
}

/// BSWA layer forward: errors if the model has FAM.
pub fn layer_forward_bswa<S: Scalar>(
    model: &Model<S>,
    layer: usize,
    input: &Tensor<S>,
    state: &mut LayerState<Tensor<S>>,
    positions: &[i64],
) -> Result<Tensor<S>> {
    if model.config().fam_len() > 0 {
        return Err(Error::Config("layer_forward_bswa called on a FAM model".into()));
    }
    model.layer_forward(layer, input, state, positions, 0.0)
}

/// FAM layer forward; `state.fam` must hold the previous FAM.
pub fn layer_forward_fam<S: Scalar>(
    model: &Model<S>,
    layer: usize,
    input: &Tensor<S>,
    state: &mut LayerState<Tensor<S>>,
    positions: &[i64],
) -> Result<Tensor<S>> {
    if model.config().fam_len() == 0 {
        return Err(Error::Config("layer_forward_fam requires fam_len >= 1".into()));
    }
    model.layer_forward(layer, input, state, positions, 0.0)
}

/// Streaming inference: one block per call, constant-size state between calls.
pub struct StreamSession<'m, S> {
    model: &'m Model<S>,
    layers: Vec<LayerState<Tensor<S>>>,
    init: FamInit<S>,
    next_pos: i64,
    started: bool,
}

impl<'m, S: Scalar> StreamSession<'m, S> {
    pub fn new(model: &'m Model<S>) -> Self {
        Self { model, layers: model.new_states(), init: FamInit::Learned, next_pos: 0, started: false }
    }

    /// Starts from a restored FAM instead of the learned one.
    pub fn with_init(mut self, init: FamInit<S>) -> Self {
        self.init = init;
        self
    }

    /// Resumes from previously persisted layer states.
    pub fn resume(model: &'m Model<S>, layers: Vec<LayerState<Tensor<S>>>, next_pos: i64) -> Result<Self> {
        let cfg = model.config();
        if layers.len() != cfg.num_layers {
            return Err(Error::StateMismatch(format!("{} layer states for {} layers", layers.len(), cfg.num_layers)));
        }
        for st in &layers {
            if st.kv.capacity() != cfg.layout.memory_segments {
                return Err(Error::StateMismatch(format!("ring capacity {} != {}", st.kv.capacity(), cfg.layout.memory_segments)));
            }
            for blk in st.kv.iter() {
                if blk.keys.cols() != cfg.d_model || blk.values.cols() != cfg.d_model {
                    return Err(Error::StateMismatch("cached key width differs from d_model".into()));
                }
            }
            match &st.fam {
                Some(f) if f.fam.shape() != [cfg.fam_len(), cfg.d_model] => {
                    return Err(Error::StateMismatch(format!("FAM shape {:?}", f.fam.shape())))
                }
                None if cfg.fam_len() > 0 => return Err(Error::StateMismatch("FAM state missing".into())),
                Some(_) if cfg.fam_len() == 0 => return Err(Error::StateMismatch("unexpected FAM state".into())),
                _ => {}
            }
        }
        Ok(Self { model, layers, init: FamInit::Learned, next_pos, started: true })
    }

    /// Processes up to one block of tokens and returns their next-token logits.
    pub fn feed_block(&mut self, tokens: &[u32]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let mv = self.model.bind(&mut g)?;
        let mut vs = self.layers.iter().map(|l| l.to_graph(&mut g)).collect::<Result<Vec<_>>>()?;
        if !self.started {
            self.model.seed_fams(&mut g, &mv, &mut vs, &self.init, 0.0)?;
        }
        let out = self.model.block_step(&mut g, &mv, &mut vs, tokens, self.next_pos, 0.0)?;
        for ((dst, src), &(kv, fam)) in self.layers.iter_mut().zip(&vs).zip(&out.pushed) {
            dst.absorb(&g, src, kv, fam);
        }
        self.next_pos += tokens.len() as i64;
        self.started = true;
        Ok(g.value(out.logits).clone())
    }

    pub fn layers(&self) -> &[LayerState<Tensor<S>>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<LayerState<Tensor<S>>> {
        self.layers
    }

    pub fn next_position(&self) -> i64 {
        self.next_pos
    }

    /// Bytes held by all layer states.
    pub fn resident_bytes(&self) -> usize {
        self.layers.iter().map(LayerState::resident_bytes).sum()
    }

    /// FAM tensors of every layer, when the model has FAM.
    pub fn fams(&self) -> Vec<Tensor<S>> {
        self.layers.iter().filter_map(|l| l.fam.as_ref().map(|f| f.fam.clone())).collect()
    }
}
