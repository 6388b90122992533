//! Weighted LM loss, the diversity auxiliary loss, Adam, and the FAM
//! training techniques: random position offset (RPO) and random state
//! passing (RSP).

mod adam;
mod loss;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use loss::{diversity_loss, weighted_xent};

use crate::config_text::KvText;
use crate::error::{Error, Result};
use crate::model::{FamInit, ForwardMode, ForwardOptions, Model};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::rope::{sample_rpo, Phase};
use crate::tasks::{span_exact_match, PackedExample, TaskSpec, ToyVocab};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Probability of starting a step from the FAM saved by the previous step.
    pub rsp_probability: f64,
    pub rpo_enabled: bool,
    pub diversity_weight: f64,
    pub stop_grad_memory: bool,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub curriculum: Curriculum,
}

/// Filler-length schedule used by [`fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Curriculum {
    /// Sample the task's full filler range from the first step.
    Off,
    /// Start with the filler cap at the task minimum and raise it by
    /// `increment` whenever the smoothed loss is below `threshold`, at most
    /// once per `patience` steps. Half of each batch uses the cap itself, the
    /// rest is uniform below it.
    Adaptive { threshold: f64, increment: usize, patience: usize },
}

impl Curriculum {
    fn to_text(self) -> String {
        match self {
            Self::Off => "off".into(),
            Self::Adaptive { threshold, increment, patience } => format!("adaptive:{threshold}:{increment}:{patience}"),
        }
    }

    fn parse(text: &str) -> Result<Self> {
        if text == "off" {
            return Ok(Self::Off);
        }
        let bad = || Error::Config(format!("invalid curriculum {text:?} (expected off or adaptive:THRESHOLD:INCREMENT:PATIENCE)"));
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            ["adaptive", t, i, p] => Ok(Self::Adaptive {
                threshold: t.parse().map_err(|_| bad())?,
                increment: i.parse().map_err(|_| bad())?,
                patience: p.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 500,
            rsp_probability: 0.8,
            rpo_enabled: true,
            diversity_weight: 0.0,
            stop_grad_memory: false,
            seed: 0,
            grad_clip: Some(1.0),
            batch_size: 1,
            curriculum: Curriculum::Adaptive { threshold: 0.3, increment: 16, patience: 100 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rsp_probability) {
            return Err(Error::Config(format!("rsp_probability {} outside [0, 1]", self.rsp_probability)));
        }
        if self.diversity_weight < 0.0 || !self.diversity_weight.is_finite() {
            return Err(Error::Config("diversity_weight must be finite and non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if let Curriculum::Adaptive { increment: 0, .. } = self.curriculum {
            return Err(Error::Config("curriculum increment must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("learning_rate", self.learning_rate);
        kv.set("steps", self.steps);
        kv.set("rsp_probability", self.rsp_probability);
        kv.set("rpo_enabled", self.rpo_enabled);
        kv.set("diversity_weight", self.diversity_weight);
        kv.set("stop_grad_memory", self.stop_grad_memory);
        kv.set("seed", self.seed);
        kv.set("grad_clip", self.grad_clip.map_or_else(|| "-".to_string(), |c| c.to_string()));
        kv.set("batch_size", self.batch_size);
        kv.set("curriculum", self.curriculum.to_text());
        kv
    }

    /// Reads the keys written by [`TrainConfig::to_kv`]; absent keys keep their defaults.
    pub fn from_kv(kv: &KvText) -> Result<Self> {
        let d = Self::default();
        let grad_clip = match kv.get("grad_clip") {
            None => d.grad_clip,
            Some("-") => None,
            Some(v) => Some(v.parse().map_err(|_| Error::Config(format!("invalid grad_clip {v:?}")))?),
        };
        let curriculum = match kv.get("curriculum") {
            None => d.curriculum,
            Some(v) => Curriculum::parse(v)?,
        };
        let cfg = Self {
            learning_rate: kv.parse_value("learning_rate")?.unwrap_or(d.learning_rate),
            steps: kv.parse_value("steps")?.unwrap_or(d.steps),
            rsp_probability: kv.parse_value("rsp_probability")?.unwrap_or(d.rsp_probability),
            rpo_enabled: kv.parse_value("rpo_enabled")?.unwrap_or(d.rpo_enabled),
            diversity_weight: kv.parse_value("diversity_weight")?.unwrap_or(d.diversity_weight),
            stop_grad_memory: kv.parse_value("stop_grad_memory")?.unwrap_or(d.stop_grad_memory),
            seed: kv.parse_value("seed")?.unwrap_or(d.seed),
            grad_clip,
            batch_size: kv.parse_value("batch_size")?.unwrap_or(d.batch_size),
            curriculum,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-layer FAM saved at the end of the previous step (first batch lane).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SavedFamStore<S> {
    pub fams: Vec<Tensor<S>>,
    pub valid: bool,
}

impl<S: Scalar> SavedFamStore<S> {
    pub fn new() -> Self {
        Self { fams: Vec::new(), valid: false }
    }

    pub fn from_saved(fams: Vec<Tensor<S>>) -> Self {
        let valid = !fams.is_empty();
        Self { fams, valid }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub aux_loss: f64,
    pub rpo_offset: f64,
    pub rsp_restored: bool,
    pub wall_ms: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,loss,aux_loss,rpo_offset,rsp_restored,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.step,
            self.loss,
            self.aux_loss,
            self.rpo_offset,
            u8::from(self.rsp_restored),
            self.wall_ms
        )
    }
}

/// One optimizer step over `batch`, each example an independent lane.
///
/// Draws the position offset and the restore decision once per step; all
/// lanes share them. Leaves the first lane's final FAM in `store`.
pub fn train_step<S: Scalar, R: Rng + ?Sized>(
    model: &mut Model<S>,
    batch: &[PackedExample],
    store: &mut SavedFamStore<S>,
    cfg: &TrainConfig,
    opt: &mut Adam<S>,
    rng: &mut R,
) -> Result<StepReport> {
    let started = Instant::now();
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    model.set_stop_grad_memory(cfg.stop_grad_memory);
    let rpo_offset = if cfg.rpo_enabled { sample_rpo(&model.config().rope, Phase::Train, rng) } else { 0.0 };
    let draw: f64 = rng.gen();
    let has_fam = model.config().fam_len() > 0;
    let rsp_restored = has_fam && store.valid && draw < cfg.rsp_probability;
    let init = if rsp_restored { FamInit::Restored(store.fams.clone()) } else { FamInit::Learned };
    let opts = ForwardOptions { offset: rpo_offset, init };

    model.params_mut().zero_grad();
    let lane_scale = S::of(1.0 / batch.len() as f64);
    let (mut loss_sum, mut aux_sum) = (0.0, 0.0);
    let mut saved = Vec::new();
    for (lane, ex) in batch.iter().enumerate() {
        if ex.len() < 2 {
            return Err(Error::Config("example needs at least two tokens".into()));
        }
        let mut g = Graph::new();
        let mv = model.bind(&mut g)?;
        let trace = model.forward_graph(&mut g, &mv, &ex.tokens[..ex.len() - 1], &opts)?;
        let (targets, weights) = ex.shifted_targets();
        let weights: Vec<S> = weights.iter().map(|&w| S::of(w as f64)).collect();
        let norm: S = weights.iter().copied().sum();
        let mut loss = g.weighted_xent(trace.logits, &targets, &weights, norm)?;
        loss_sum += g.value(loss).item().as_f64();
        if cfg.diversity_weight > 0.0 {
            let terms = trace.probs.iter().map(|&p| g.neg_entropy_of_mean(p)).collect::<Result<Vec<_>>>()?;
            let total = g.add_scalars(&terms)?;
            let aux = g.scale(total, S::of(1.0 / terms.len() as f64))?;
            aux_sum += g.value(aux).item().as_f64();
            let weighted = g.scale(aux, S::of(cfg.diversity_weight))?;
            loss = g.add(loss, weighted)?;
        }
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let loss = g.scale(loss, lane_scale)?;
        let grads = g.backward(loss)?;
        g.accumulate_param_grads(&grads, model.params_mut());
        if lane == 0 {
            saved = trace.final_fams.iter().map(|&f| g.value(f).clone()).collect();
        }
    }
    opt.update(model.params_mut());
    if has_fam {
        store.fams = saved;
        store.valid = true;
    }
    let n = batch.len() as f64;
    Ok(StepReport {
        step: opt.steps_taken() as usize,
        loss: loss_sum / n,
        aux_loss: aux_sum / n,
        rpo_offset,
        rsp_restored,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// State left behind by [`fit`].
#[derive(Clone, Debug)]
pub struct FitSummary<S> {
    pub store: SavedFamStore<S>,
    /// Filler cap reached by the curriculum.
    pub filler_cap: usize,
    pub final_loss: f64,
}

/// Runs `cfg.steps` optimizer steps on examples drawn from `task`. All
/// randomness comes from `cfg.seed`. `on_step` sees every report together
/// with the filler cap in force for that step; an error from it stops the run.
pub fn fit<S: Scalar>(
    model: &mut Model<S>,
    task: &TaskSpec,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport, usize) -> Result<()>,
) -> Result<FitSummary<S>> {
    cfg.validate()?;
    task.validate()?;
    let vocab = ToyVocab::new();
    if model.config().vocab_size < vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} is smaller than the task vocabulary {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate).with_grad_clip(cfg.grad_clip);
    let mut store = SavedFamStore::new();
    let mut cap = match cfg.curriculum {
        Curriculum::Off => task.filler_max,
        Curriculum::Adaptive { .. } => task.filler_min,
    };
    let mut smoothed: Option<f64> = None;
    let mut since_raise = 0;
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let n = match cfg.curriculum {
                Curriculum::Off => rng.gen_range(task.filler_min..=task.filler_max),
                Curriculum::Adaptive { .. } if rng.gen_bool(0.5) => cap,
                Curriculum::Adaptive { .. } => rng.gen_range(task.filler_min..=cap),
            };
            batch.push(task.generate(&vocab, n, &mut rng)?);
        }
        let report = train_step(model, &batch, &mut store, cfg, &mut opt, &mut rng)?;
        on_step(&report, cap)?;
        let avg = smoothed.map_or(report.loss, |a| 0.97 * a + 0.03 * report.loss);
        smoothed = Some(avg);
        since_raise += 1;
        if let Curriculum::Adaptive { threshold, increment, patience } = cfg.curriculum {
            if avg < threshold && since_raise > patience && cap < task.filler_max {
                cap = (cap + increment).min(task.filler_max);
                since_raise = 0;
            }
        }
    }
    Ok(FitSummary { store, filler_cap: cap, final_loss: smoothed.unwrap_or(f64::NAN) })
}

/// Exact-match accuracy over the answer spans of `examples`.
pub fn span_accuracy<S: Scalar>(model: &Model<S>, examples: &[PackedExample], mode: ForwardMode) -> Result<f64> {
    let mut hits = Vec::with_capacity(examples.len());
    for ex in examples {
        let logits = model.forward_logits(&ex.tokens, mode)?;
        hits.push(span_exact_match(&logits, ex));
    }
    Ok(crate::tasks::mean_accuracy(&hits))
}
