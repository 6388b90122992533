use std::fs;
use std::io::{BufWriter, Write};

use anyhow::{anyhow, bail, Context, Result};
use fam_core::attention::{build_bswa_mask, build_fam_block_mask, BlockLayout};
use fam_core::config_text::KvText;
use fam_core::model::{lm_grad_check, param_count, receptive_field_probe, ForwardMode, Model, ModelConfig};
use fam_core::tasks::{gen_passkey, FillerKind, TaskSpec, ToyVocab, VOCAB_SIZE};
use fam_core::training::{fit, span_accuracy, StepReport, TrainConfig};
use fam_core::{Checkpoint, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{DumpMaskArgs, EvalArgs, GradCheckArgs, ProbeArgs, TrainArgs};

/// Manifest keys describing a finished run; ignored when a manifest is
/// reused as a config file.
const RUN_KEYS: [&str; 5] = ["build_id", "checkpoint_sha256", "dtype", "out_dir", "param_count"];

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(msg.into())
}

/// Non-finite training losses get their own code; every other failure is
/// bad input of some kind.
pub fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<fam_core::Error>() {
        Some(fam_core::Error::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn default_kv() -> KvText {
    let layout = BlockLayout::new(16, 3, 4).expect("default layout is valid");
    let model = ModelConfig::new(2, 64, 4, VOCAB_SIZE, layout).expect("default model config is valid");
    let mut kv = model.to_kv();
    kv.merge(&TrainConfig::default().to_kv());
    kv.merge(&TaskSpec::default().to_kv());
    kv
}

fn flag_kv(a: &TrainArgs) -> KvText {
    fn put<T: ToString>(kv: &mut KvText, key: &str, v: &Option<T>) {
        if let Some(v) = v {
            kv.set(key, v.to_string());
        }
    }
    let mut kv = KvText::new();
    put(&mut kv, "task", &a.task);
    put(&mut kv, "num_layers", &a.layers);
    put(&mut kv, "d_model", &a.dmodel);
    put(&mut kv, "num_heads", &a.heads);
    put(&mut kv, "ff_multiplier", &a.ff_mult);
    put(&mut kv, "block_size", &a.block);
    put(&mut kv, "memory_segments", &a.m);
    put(&mut kv, "fam_len", &a.fam);
    put(&mut kv, "xl_window", &a.xl_window);
    put(&mut kv, "steps", &a.steps);
    put(&mut kv, "learning_rate", &a.lr);
    put(&mut kv, "batch_size", &a.batch);
    put(&mut kv, "rsp_probability", &a.rsp);
    put(&mut kv, "rpo_enabled", &a.rpo);
    put(&mut kv, "diversity_weight", &a.diversity);
    put(&mut kv, "stop_grad_memory", &a.stop_grad);
    put(&mut kv, "grad_clip", &a.grad_clip);
    put(&mut kv, "curriculum", &a.curriculum);
    put(&mut kv, "filler_min", &a.filler_min);
    put(&mut kv, "filler_max", &a.filler_max);
    put(&mut kv, "filler", &a.filler_kind);
    put(&mut kv, "key_len", &a.key_len);
    put(&mut kv, "repeat_segment", &a.repeat_segment);
    put(&mut kv, "seed", &a.seed);
    kv
}

/// Flags, then the config file, then `FAM_SEED`, then defaults.
fn resolve_train_kv(a: &TrainArgs) -> Result<KvText> {
    let defaults = default_kv();
    let mut kv = defaults.clone();
    if let Ok(seed) = std::env::var("FAM_SEED") {
        let seed: u64 = seed.trim().parse().map_err(|_| usage(format!("FAM_SEED={seed:?} is not an integer")))?;
        kv.set("seed", seed);
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file = KvText::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for (k, v) in file.iter() {
            if RUN_KEYS.contains(&k) {
                continue;
            }
            if !defaults.contains(k) {
                return Err(usage(format!("{}: unknown key {k:?}", path.display())));
            }
            kv.set(k, v);
        }
    }
    kv.merge(&flag_kv(a));
    Ok(kv)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    let kv = resolve_train_kv(a)?;
    let invalid = |e: fam_core::Error| usage(e.to_string());
    let model_cfg = ModelConfig::from_kv(&kv).map_err(invalid)?;
    let train_cfg = TrainConfig::from_kv(&kv).map_err(invalid)?;
    let task = TaskSpec::from_kv(&kv).map_err(invalid)?;
    if model_cfg.vocab_size < ToyVocab::new().len() {
        return Err(usage(format!("vocab_size must be at least {}", ToyVocab::new().len())));
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = BufWriter::new(fs::File::create(a.out.join("train.csv"))?);
    writeln!(csv, "{}", StepReport::CSV_HEADER)?;

    let mut model = Model::<f32>::new(model_cfg.clone(), train_cfg.seed)?;
    let log_every = a.log_every;
    let summary = fit(&mut model, &task, &train_cfg, |r, cap| {
        writeln!(csv, "{}", r.csv_row())?;
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!("step {} loss {:.4} filler_cap {cap}", r.step, r.loss);
        }
        Ok(())
    })?;
    csv.flush()?;

    let ckpt = Checkpoint::from_model(&model, &summary.store.fams).encode();
    let ckpt_path = a.out.join("checkpoint.famc");
    fs::write(&ckpt_path, &ckpt).with_context(|| format!("writing {}", ckpt_path.display()))?;
    let hash = sha256_hex(&ckpt);

    let mut manifest = kv;
    manifest.set("build_id", option_env!("FAM_BUILD_ID").unwrap_or(env!("CARGO_PKG_VERSION")));
    manifest.set("checkpoint_sha256", &hash);
    manifest.set("dtype", f32::DTYPE);
    manifest.set("out_dir", a.out.display());
    manifest.set("param_count", param_count(&model_cfg));
    fs::write(a.out.join("manifest.txt"), manifest.to_canonical())?;

    println!(
        "trained {} steps: loss {:.4}, filler cap {}, {} parameters, checkpoint sha256 {hash}",
        train_cfg.steps,
        summary.final_loss,
        summary.filler_cap,
        param_count(&model_cfg)
    );
    Ok(0)
}

fn eval_model<S: Scalar>(model: &Model<S>, a: &EvalArgs) -> Result<String> {
    let vocab = ToyVocab::new();
    let cfg = model.config();
    if cfg.vocab_size < vocab.len() {
        bail!("checkpoint vocabulary {} is smaller than the task vocabulary {}", cfg.vocab_size, vocab.len());
    }
    let tag = a.tag.clone().unwrap_or_else(|| {
        if cfg.fam_len() > 0 {
            "fam".to_string()
        } else {
            format!("bswa-m{}", cfg.layout.memory_segments)
        }
    });
    if tag.contains(',') {
        return Err(usage("--tag must not contain a comma"));
    }
    let mut out = String::from("filler_len,accuracy,model\n");
    for &f in &a.fillers {
        // One stream per filler length keeps rows independent of the grid.
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(f as u64);
        let examples = (0..a.samples)
            .map(|_| gen_passkey(&vocab, f, a.digits, FillerKind::Repeated, &mut rng))
            .collect::<fam_core::Result<Vec<_>>>()?;
        let acc = span_accuracy(model, &examples, ForwardMode::Stream)?;
        out.push_str(&format!("{f},{acc:.4},{tag}\n"));
    }
    Ok(out)
}

pub fn eval_passkey(a: &EvalArgs) -> Result<u8> {
    if a.samples == 0 || a.digits == 0 || a.fillers.is_empty() {
        return Err(usage("--samples, --digits and --fillers must be non-empty"));
    }
    let bytes = fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let csv = match Checkpoint::<f32>::decode(&bytes) {
        Ok(c) => eval_model(&c.into_model()?.0, a)?,
        Err(first) => match Checkpoint::<f64>::decode(&bytes) {
            Ok(c) => eval_model(&c.into_model()?.0, a)?,
            Err(_) => return Err(first.into()),
        },
    };
    match &a.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

pub fn dump_mask(a: &DumpMaskArgs) -> Result<u8> {
    let mut layout = BlockLayout::new(a.b, a.m, a.f).map_err(|e| usage(e.to_string()))?;
    if let Some(w) = a.w {
        layout = layout.with_xl_window(w).map_err(|e| usage(e.to_string()))?;
    }
    let mask = if a.f > 0 {
        build_fam_block_mask(&layout)
    } else {
        let t = a.seq_len.ok_or_else(|| usage("--T is required when --f is 0"))?;
        build_bswa_mask(t, &layout)
    }
    .map_err(|e| usage(e.to_string()))?;
    print!("{}", mask.render(&layout));
    Ok(0)
}

pub fn probe_rf(a: &ProbeArgs) -> Result<u8> {
    let fam = match a.arch.as_str() {
        "bswa" => 0,
        "fam" => a.fam,
        other => return Err(usage(format!("unknown --arch {other:?} (expected bswa or fam)"))),
    };
    if a.arch == "fam" && fam == 0 {
        return Err(usage("--arch fam needs --fam >= 1"));
    }
    let layout = BlockLayout::new(a.block, a.m, fam).map_err(|e| usage(e.to_string()))?;
    let cfg = ModelConfig::new(a.layers, a.dmodel, 2, VOCAB_SIZE, layout).map_err(|e| usage(e.to_string()))?;
    let model = Model::<f64>::new(cfg, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let tokens: Vec<u32> = (0..(a.kmax + 1) * a.block).map(|_| rng.gen_range(0..VOCAB_SIZE as u32)).collect();
    println!("k,magnitude");
    for k in 0..=a.kmax {
        println!("{k},{}", receptive_field_probe(&model, &tokens, k)?);
    }
    Ok(0)
}

/// Two layers, d=8, two heads, blocks of 2, three blocks of input.
fn grad_check_preset(name: &str, seed: u64) -> Result<(Model<f64>, Vec<u32>)> {
    let fam = match name {
        "tiny_fam" => 1,
        "tiny_bswa" => 0,
        other => return Err(usage(format!("unknown preset {other:?} (expected tiny_fam or tiny_bswa)"))),
    };
    let cfg = ModelConfig::new(2, 8, 2, 16, BlockLayout::new(2, 1, fam)?)?;
    let model = Model::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = (0..7).map(|_| rng.gen_range(0..16)).collect();
    Ok((model, tokens))
}

pub fn grad_check(a: &GradCheckArgs) -> Result<u8> {
    let (model, tokens) = grad_check_preset(&a.config, a.seed)?;
    let report = lm_grad_check(&model, &tokens, a.h)?;
    println!("param,max_rel_err");
    for (name, err) in &report.per_param {
        println!("{name},{err:e}");
    }
    let pass = report.max_relative_error <= a.threshold;
    eprintln!(
        "{} max relative error {:e} over {} coordinates (threshold {:e})",
        if pass { "ok:" } else { "FAILED:" },
        report.max_relative_error,
        report.coordinates,
        a.threshold
    );
    Ok(if pass { 0 } else { 1 })
}
