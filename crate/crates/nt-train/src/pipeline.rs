//! Stage orchestration. Every stage writes its artifact under a name keyed
//! by the hash of the configuration slice that determines its bytes, so a
//! rerun with the same inputs reuses the file instead of recomputing it,
//! and an ablation that only touches the adapter or the task mix still
//! shares the pretrained backbone and generator.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use nt_core::Tensor;
use nt_mmud::{generate_dataset, load_dataset, Dataset, GenConfig, Sample, GRID};
use nt_model::backbone::{greedy_generate, pretrain_lm, BackboneWeights, EvalAdapter};
use nt_model::synth::{generate_image, generate_indices, pretrain_ar, Codebook, ConditionEncoder, GenArWeights};
use nt_model::token::{extract_task_tokens, TaskTokenKind};

use crate::artifacts::{atomic_write, write_pgm, write_ppm};
use crate::assemble::{Assembler, TaskKind};
use crate::ckpt::Checkpoint;
use crate::config::{backbone_hash, config_hash, genar_hash, RunConfig};
use crate::error::{Result, TrainError};
use crate::evalrun::{answer_pos, decode_at, evaluate, gen_head_predict, GenStack};
use crate::metrics::Metrics;
use crate::tune::{tune, Tunable};

pub fn backbone_ckpt_path(cfg: &RunConfig, results: &Path) -> PathBuf {
    results.join(format!("backbone-{}.ntck", backbone_hash(cfg)))
}

pub fn genar_ckpt_path(cfg: &RunConfig, results: &Path) -> PathBuf {
    results.join(format!("genar-{}.ntck", genar_hash(cfg)))
}

/// Directory holding the tuned checkpoint and its metric reports.
pub fn run_dir(cfg: &RunConfig, results: &Path) -> PathBuf {
    results.join(config_hash(cfg))
}

/// Writes a fresh dataset into the configured directory. Refuses to touch a
/// non-empty directory unless `force` is set.
pub fn run_gen_data(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let dir = cfg.dataset_dir();
    if dir.exists() && dir.read_dir()?.next().is_some() && !force {
        return Err(TrainError::Config(format!(
            "{} is not empty; pass --force to regenerate",
            dir.display()
        )));
    }
    let gen = GenConfig {
        train: cfg.data.train,
        val: cfg.data.val,
        test: cfg.data.test,
        max_objects: cfg.data.max_objects,
        refexps_per_scene: cfg.data.refexps_per_scene,
    };
    generate_dataset(&dir, &gen, cfg.seed)?;
    Ok(dir)
}

/// Loads the configured dataset and checks it was generated under the same
/// seed and split sizes the run expects.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if !dir.join("manifest.json").is_file() {
        return Err(TrainError::MissingInput(format!(
            "no dataset at {}; run gen-data first",
            dir.display()
        )));
    }
    let ds = load_dataset(&dir)?;
    let m = &ds.manifest;
    let want = (cfg.seed, cfg.data.train, cfg.data.val, cfg.data.test);
    let have = (m.seed, m.splits.train, m.splits.val, m.splits.test);
    if want != have {
        return Err(TrainError::Incompatible(format!(
            "dataset at {} was generated as (seed, train, val, test) = {have:?}, \
             but the config expects {want:?}",
            dir.display()
        )));
    }
    Ok(ds)
}

pub struct StageReport {
    pub path: PathBuf,
    pub reused: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn meta_f64(ck: &Checkpoint, key: &str) -> f64 {
    ck.meta().ok().and_then(|m| m.get(key).and_then(|v| v.as_f64())).unwrap_or(f64::NAN)
}

fn check_meta(ck: &Checkpoint, path: &Path, kind: &str, hash_key: &str, hash: &str) -> Result<()> {
    if ck.meta_str("kind").as_deref() != Some(kind) {
        return Err(TrainError::Incompatible(format!("{} is not a {kind} checkpoint", path.display())));
    }
    if ck.meta_str(hash_key).as_deref() != Some(hash) {
        return Err(TrainError::Incompatible(format!(
            "{} was produced under {hash_key}={}, but this config hashes to {hash}",
            path.display(),
            ck.meta_str(hash_key).unwrap_or_default()
        )));
    }
    Ok(())
}

/// Language-model pretraining over the training captions. The finished
/// backbone is saved with every section frozen; an existing artifact for
/// the same hash is reused as-is.
pub fn pretrain_backbone(cfg: &RunConfig, ds: &Dataset, results: &Path) -> Result<StageReport> {
    let path = backbone_ckpt_path(cfg, results);
    if path.is_file() {
        let ck = Checkpoint::load(&path)?;
        check_meta(&ck, &path, "backbone", "backbone_hash", &backbone_hash(cfg))?;
        log::info!("reusing backbone checkpoint {}", path.display());
        return Ok(StageReport {
            path,
            reused: true,
            initial_loss: meta_f64(&ck, "initial_loss"),
            final_loss: meta_f64(&ck, "final_loss"),
        });
    }
    let assembler = assembler_for(cfg, ds)?;
    let corpus: Vec<Vec<u32>> =
        ds.train.iter().map(|s| assembler.vocab.encode(&s.caption)).collect::<std::result::Result<_, _>>()?;
    let mut weights = BackboneWeights::init(cfg.backbone_config(ds.vocab.len()), cfg.seed)?;
    let report = pretrain_lm(
        &mut weights,
        &corpus,
        cfg.backbone.pretrain_steps,
        cfg.backbone.pretrain_batch,
        cfg.backbone.pretrain_lr,
        cfg.seed,
    )?;
    log::info!(
        "backbone pretraining: loss {:.4} -> {:.4} over {} steps",
        report.initial_loss,
        report.final_loss,
        cfg.backbone.pretrain_steps
    );
    let meta = json!({
        "kind": "backbone",
        "backbone_hash": backbone_hash(cfg),
        "seed": cfg.seed,
        "vocab": ds.vocab.len(),
        "steps": cfg.backbone.pretrain_steps,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
    });
    let mut ck = Checkpoint::new(&meta);
    for (name, t) in weights.named() {
        ck.push_tensor(&name, t, true);
    }
    ck.save(&path)?;
    Ok(StageReport { path, reused: false, initial_loss: report.initial_loss, final_loss: report.final_loss })
}

/// Fits the patch codebook on the training images and pretrains the
/// conditional index generator to memorize (condition, indices) pairs. The
/// artifact bundles the codebook, the condition projection and the
/// generator, all frozen.
pub fn pretrain_genar(cfg: &RunConfig, ds: &Dataset, results: &Path) -> Result<StageReport> {
    let path = genar_ckpt_path(cfg, results);
    if path.is_file() {
        let ck = Checkpoint::load(&path)?;
        check_meta(&ck, &path, "genar", "genar_hash", &genar_hash(cfg))?;
        log::info!("reusing generator checkpoint {}", path.display());
        return Ok(StageReport {
            path,
            reused: true,
            initial_loss: meta_f64(&ck, "initial_loss"),
            final_loss: meta_f64(&ck, "final_loss"),
        });
    }
    let images: Vec<&[u8]> = ds.train.iter().map(|s| s.image.as_slice()).collect();
    let codebook = Codebook::fit(&images, GRID, cfg.heads.genar.patch, cfg.heads.genar.k, cfg.seed)?;
    let cond = ConditionEncoder::<f64>::new(GRID, cfg.heads.d_c, cfg.seed)?;
    let pairs: Vec<(Tensor<f64>, Vec<usize>)> = ds
        .train
        .iter()
        .map(|s| Ok((cond.encode(&s.image)?, codebook.encode(&s.image, GRID)?)))
        .collect::<Result<_>>()?;
    let mut weights = GenArWeights::init(cfg.genar_config(), cfg.seed)?;
    let report = pretrain_ar(
        &mut weights,
        &pairs,
        cfg.heads.genar.steps,
        cfg.heads.genar.batch,
        cfg.heads.genar.lr,
        cfg.seed,
    )?;
    // Memorization probe: greedy regeneration of the first training pairs.
    let probe = pairs.len().min(50);
    let (mut hit, mut total) = (0usize, 0usize);
    for (c, idx) in &pairs[..probe] {
        let out = generate_indices(&weights, c)?;
        hit += out.iter().zip(idx).filter(|(a, b)| a == b).count();
        total += idx.len();
    }
    let memorization = hit as f64 / total as f64;
    log::info!(
        "generator pretraining: loss {:.4} -> {:.4}, memorization {:.3} over {probe} pairs",
        report.initial_loss,
        report.final_loss,
        memorization
    );
    let meta = json!({
        "kind": "genar",
        "genar_hash": genar_hash(cfg),
        "seed": cfg.seed,
        "steps": cfg.heads.genar.steps,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "memorization": memorization,
    });
    let mut ck = Checkpoint::new(&meta);
    ck.push_tensor("codebook/centroids", &codebook.centroids, true);
    ck.push_tensor("cond/w", &cond.w, true);
    for (name, t) in weights.named() {
        ck.push_tensor(&name, t, true);
    }
    ck.save(&path)?;
    Ok(StageReport { path, reused: false, initial_loss: report.initial_loss, final_loss: report.final_loss })
}

fn fill_named(ck: &Checkpoint, slots: Vec<(String, &mut Tensor<f64>)>) -> Result<()> {
    for (name, slot) in slots {
        let stored = ck.tensor(&name)?;
        if stored.shape() != slot.shape() {
            return Err(TrainError::Incompatible(format!(
                "section {name:?} has shape {:?}, expected {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        *slot = stored;
    }
    Ok(())
}

pub fn backbone_from_ckpt(cfg: &RunConfig, vocab: usize, ck: &Checkpoint) -> Result<BackboneWeights<f64>> {
    let mut w = BackboneWeights::init(cfg.backbone_config(vocab), cfg.seed)?;
    fill_named(ck, w.named_mut())?;
    Ok(w)
}

pub fn genstack_from_ckpt(cfg: &RunConfig, ck: &Checkpoint) -> Result<GenStack> {
    let mut genar = GenArWeights::init(cfg.genar_config(), cfg.seed)?;
    fill_named(ck, genar.named_mut())?;
    let centroids = ck.tensor("codebook/centroids")?;
    if centroids.shape() != [cfg.heads.genar.k, cfg.heads.genar.patch * cfg.heads.genar.patch * 3] {
        return Err(TrainError::Incompatible(format!(
            "codebook centroids have shape {:?}",
            centroids.shape()
        )));
    }
    Ok(GenStack { codebook: Codebook { patch: cfg.heads.genar.patch, centroids }, genar })
}

pub fn tunable_from_ckpt(cfg: &RunConfig, backbone: &BackboneWeights<f64>, ck: &Checkpoint) -> Result<Tunable> {
    let mut t = Tunable::init(cfg, backbone)?;
    fill_named(ck, t.named_mut())?;
    Ok(t)
}

/// Replaces the assembler's condition projection with the stored one so
/// reconstruction scoring sees exactly the encoder the generator trained
/// against.
pub fn restore_cond(assembler: &mut Assembler, ck: &Checkpoint) -> Result<()> {
    let w = ck.tensor("cond/w")?;
    if w.shape() != assembler.cond.w.shape() {
        return Err(TrainError::Incompatible(format!(
            "condition projection has shape {:?}, expected {:?}",
            w.shape(),
            assembler.cond.w.shape()
        )));
    }
    assembler.cond.w = w;
    Ok(())
}

pub fn assembler_for(cfg: &RunConfig, ds: &Dataset) -> Result<Assembler> {
    Assembler::new(
        &ds.vocab,
        cfg.seed,
        cfg.backbone.patch,
        cfg.backbone.d_h,
        cfg.heads.d_c,
        cfg.backbone.max_len,
        cfg.mask_side(),
    )
}

/// Per-component trainable parameter counts against the frozen backbone.
#[derive(Clone, Debug, Serialize)]
pub struct ParamBreakdown {
    pub task_rows: usize,
    pub adapter: usize,
    pub decoder: usize,
    pub gen_head: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub fraction: f64,
}

pub fn trainable_breakdown(backbone: &BackboneWeights<f64>, tunable: &Tunable) -> ParamBreakdown {
    let mut b = ParamBreakdown {
        task_rows: 0,
        adapter: 0,
        decoder: 0,
        gen_head: 0,
        trainable: 0,
        frozen: backbone.param_count(),
        fraction: 0.0,
    };
    for (name, t) in tunable.named() {
        let n = t.numel();
        b.trainable += n;
        if name == "tokens/task_rows" {
            b.task_rows += n;
        } else if name.starts_with("adapter/") {
            b.adapter += n;
        } else if name.starts_with("heads/mask/") {
            b.decoder += n;
        } else {
            b.gen_head += n;
        }
    }
    b.fraction = b.trainable as f64 / (b.trainable + b.frozen) as f64;
    b
}

/// Adapter parameter count from the shapes alone: one down-projection and
/// `sites` up-projections per layer.
pub fn closed_form_adapter(layers: usize, d_h: usize, d_z: usize, sites: usize) -> usize {
    layers * (d_z * d_h + sites * d_h * d_z)
}

fn save_tuned(
    cfg: &RunConfig,
    ds: &Dataset,
    backbone: &BackboneWeights<f64>,
    stack: &GenStack,
    cond: &ConditionEncoder<f64>,
    tunable: &Tunable,
    extra: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let breakdown = trainable_breakdown(backbone, tunable);
    let mut meta = json!({
        "kind": "tuned",
        "config_hash": config_hash(cfg),
        "backbone_hash": backbone_hash(cfg),
        "genar_hash": genar_hash(cfg),
        "seed": cfg.seed,
        "vocab": ds.vocab.len(),
        "trainable": breakdown,
    });
    if let (Some(dst), Some(src)) = (meta.as_object_mut(), extra.as_object()) {
        for (k, v) in src {
            dst.insert(k.clone(), v.clone());
        }
    }
    let mut ck = Checkpoint::new(&meta);
    for (name, t) in backbone.named() {
        ck.push_tensor(&name, t, true);
    }
    ck.push_tensor("codebook/centroids", &stack.codebook.centroids, true);
    ck.push_tensor("cond/w", &cond.w, true);
    for (name, t) in stack.genar.named() {
        ck.push_tensor(&name, t, true);
    }
    for (name, t) in tunable.named() {
        ck.push_tensor(&name, t, false);
    }
    ck.save(path)
}

pub struct TuneOutcome {
    pub dir: PathBuf,
    pub ckpt: PathBuf,
    pub reused: bool,
    pub metrics: Metrics,
}

/// Tunes the sparse additions against the frozen stages and scores the
/// configured eval split. Writes `tuned.ntck` (self-contained: frozen
/// stages plus tunable sections), `loss.csv` and `metrics.json` under the
/// config-hash directory; an existing complete run is reused.
pub fn run_tune(
    cfg: &RunConfig,
    ds: &Dataset,
    backbone_ck: &Path,
    genar_ck: &Path,
    results: &Path,
    force: bool,
) -> Result<TuneOutcome> {
    let dir = run_dir(cfg, results);
    let ckpt_path = dir.join("tuned.ntck");
    let metrics_path = dir.join("metrics.json");
    if !force && ckpt_path.is_file() && metrics_path.is_file() {
        let ck = Checkpoint::load(&ckpt_path)?;
        check_meta(&ck, &ckpt_path, "tuned", "config_hash", &config_hash(cfg))?;
        let metrics: Metrics = serde_json::from_slice(&std::fs::read(&metrics_path)?)?;
        log::info!("reusing tuned run {}", dir.display());
        return Ok(TuneOutcome { dir, ckpt: ckpt_path, reused: true, metrics });
    }

    if !backbone_ck.is_file() {
        return Err(TrainError::MissingInput(format!(
            "backbone checkpoint {}; run pretrain --stage backbone",
            backbone_ck.display()
        )));
    }
    if !genar_ck.is_file() {
        return Err(TrainError::MissingInput(format!(
            "generator checkpoint {}; run pretrain --stage genar",
            genar_ck.display()
        )));
    }
    let bck = Checkpoint::load(backbone_ck)?;
    check_meta(&bck, backbone_ck, "backbone", "backbone_hash", &backbone_hash(cfg))?;
    let gck = Checkpoint::load(genar_ck)?;
    check_meta(&gck, genar_ck, "genar", "genar_hash", &genar_hash(cfg))?;

    let backbone = backbone_from_ckpt(cfg, ds.vocab.len(), &bck)?;
    let mut assembler = assembler_for(cfg, ds)?;
    restore_cond(&mut assembler, &gck)?;
    let stack = genstack_from_ckpt(cfg, &gck)?;

    let mut tunable = Tunable::init(cfg, &backbone)?;
    let report = match tune(cfg, &backbone, &assembler, &ds.train, &mut tunable) {
        Ok(r) => r,
        Err(TrainError::Numerical(msg)) => {
            // The tunable was rolled back to the last finished epoch; keep
            // that state around for inspection before failing.
            let rollback = dir.join("rolled-back.ntck");
            save_tuned(cfg, ds, &backbone, &stack, &assembler.cond, &tunable, json!({"rolled_back": true}), &rollback)?;
            return Err(TrainError::Numerical(format!(
                "{msg}; rolled-back state saved to {}",
                rollback.display()
            )));
        }
        Err(e) => return Err(e),
    };

    let split = cfg.eval.split.as_str();
    let samples = ds
        .split(split)
        .ok_or_else(|| TrainError::Config(format!("unknown split {split:?}")))?;
    let (metrics, _) = evaluate(cfg, &backbone, &tunable, &assembler, Some(&stack), samples, split)?;

    save_tuned(
        cfg,
        ds,
        &backbone,
        &stack,
        &assembler.cond,
        &tunable,
        json!({"steps": report.steps, "epochs": cfg.train.epochs, "epoch_losses": report.epoch_losses}),
        &ckpt_path,
    )?;
    atomic_write(&dir.join("loss.csv"), report.csv.as_bytes())?;
    atomic_write(&metrics_path, &metrics.to_json())?;
    Ok(TuneOutcome { dir, ckpt: ckpt_path, reused: false, metrics })
}

/// Everything evaluation and inference need, rebuilt from one tuned
/// checkpoint.
pub struct Restored {
    pub backbone: BackboneWeights<f64>,
    pub assembler: Assembler,
    pub tunable: Tunable,
    pub stack: GenStack,
}

pub fn restore_tuned(cfg: &RunConfig, ds: &Dataset, ckpt: &Path) -> Result<Restored> {
    if !ckpt.is_file() {
        return Err(TrainError::MissingInput(format!("checkpoint {}", ckpt.display())));
    }
    let ck = Checkpoint::load(ckpt)?;
    check_meta(&ck, ckpt, "tuned", "config_hash", &config_hash(cfg))?;
    let backbone = backbone_from_ckpt(cfg, ds.vocab.len(), &ck)?;
    let mut assembler = assembler_for(cfg, ds)?;
    restore_cond(&mut assembler, &ck)?;
    let tunable = tunable_from_ckpt(cfg, &backbone, &ck)?;
    let stack = genstack_from_ckpt(cfg, &ck)?;
    Ok(Restored { backbone, assembler, tunable, stack })
}

/// Scores a tuned checkpoint on a split and writes `metrics-<split>.json`
/// next to it.
pub fn run_eval(cfg: &RunConfig, ds: &Dataset, ckpt: &Path, split: &str) -> Result<(PathBuf, Metrics)> {
    let samples = ds
        .split(split)
        .ok_or_else(|| TrainError::Config(format!("unknown split {split:?}")))?;
    let r = restore_tuned(cfg, ds, ckpt)?;
    let (metrics, _) =
        evaluate(cfg, &r.backbone, &r.tunable, &r.assembler, Some(&r.stack), samples, split)?;
    let out = ckpt
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(format!("metrics-{split}.json"));
    atomic_write(&out, &metrics.to_json())?;
    Ok((out, metrics))
}

fn find_sample<'d>(ds: &'d Dataset, id: &str) -> Result<&'d Sample> {
    for split in ["train", "val", "test"] {
        if let Some(s) = ds.split(split).and_then(|s| s.iter().find(|s| s.id == id)) {
            return Ok(s);
        }
    }
    Err(TrainError::MissingInput(format!("sample {id:?} in any split")))
}

pub struct InferOutcome {
    pub answer: String,
    pub files: Vec<PathBuf>,
}

/// Greedy decode of one sample under one task. Segmentation masks land as
/// PGMs and the generation task renders its image as a PPM, all under
/// `out_dir`.
pub fn run_infer(
    cfg: &RunConfig,
    ds: &Dataset,
    ckpt: &Path,
    sample_id: &str,
    task: TaskKind,
    out_dir: &Path,
) -> Result<InferOutcome> {
    let sample = find_sample(ds, sample_id)?;
    let r = restore_tuned(cfg, ds, ckpt)?;
    let cases = r.assembler.eval_cases(sample, task, "infer")?;
    let case = cases.first().ok_or_else(|| {
        TrainError::Incompatible(format!("sample {sample_id:?} offers no {} case", task.name()))
    })?;
    let adapter = EvalAdapter {
        cfg: &cfg.adapter,
        weights: &r.tunable.adapter,
        seed: cfg.seed,
        tag: &case.tag,
    };
    let gen = greedy_generate(
        &r.backbone,
        Some(&r.tunable.task_rows),
        Some(&adapter),
        &case.prompt,
        cfg.eval.max_new,
    )?;
    let answer = r.assembler.vocab.decode(&gen.answer);
    let mut files = Vec::new();
    match task {
        TaskKind::RefSeg | TaskKind::ReaSeg => {
            let side = cfg.mask_side();
            for (i, &(ai, obj)) in extract_task_tokens(&gen.answer, TaskTokenKind::Obj).iter().enumerate() {
                let mask = decode_at(&r.tunable, &gen, answer_pos(case, &gen, ai))?;
                let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
                let path = out_dir.join(format!("mask-{i}-obj{obj}.pgm"));
                write_pgm(&path, side, side, &bytes)?;
                files.push(path);
            }
        }
        TaskKind::Gen => {
            if let Some(&(ai, _)) = extract_task_tokens(&gen.answer, TaskTokenKind::Gen).first() {
                let pred = gen_head_predict(&r.tunable, gen.final_hidden.row(answer_pos(case, &gen, ai)));
                let norm = pred.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let unit = if norm > 0.0 {
                    Tensor::new(&[1, pred.shape()[1]], pred.data().iter().map(|v| v / norm).collect())
                        .expect("unit shape")
                } else {
                    pred
                };
                let image = generate_image(&r.stack.genar, &r.stack.codebook, &unit, GRID)?;
                let path = out_dir.join("generated.ppm");
                write_ppm(&path, GRID, GRID, &image)?;
                files.push(path);
            }
        }
        TaskKind::Caption => {}
    }
    Ok(InferOutcome { answer, files })
}

/// Runs the eval split and exports the raw retention frequencies as CSV
/// plus a tasks-by-neurons PGM of the layer-averaged frequencies.
pub fn run_inspect(cfg: &RunConfig, ds: &Dataset, ckpt: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let split = cfg.eval.split.as_str();
    let samples = ds
        .split(split)
        .ok_or_else(|| TrainError::Config(format!("unknown split {split:?}")))?;
    let r = restore_tuned(cfg, ds, ckpt)?;
    let (_, stats) =
        evaluate(cfg, &r.backbone, &r.tunable, &r.assembler, Some(&r.stack), samples, split)?;
    let csv_path = out_dir.join("activations.csv");
    atomic_write(&csv_path, stats.csv().as_bytes())?;
    let tasks = cfg.tasks();
    let d_z = cfg.adapter.d_z;
    let mut pixels = Vec::with_capacity(tasks.len() * d_z);
    for t in 0..tasks.len() {
        for f in stats.layer_mean(t) {
            pixels.push((f * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let pgm_path = out_dir.join("activations.pgm");
    write_pgm(&pgm_path, d_z, tasks.len(), &pixels)?;
    Ok(vec![csv_path, pgm_path])
}

/// Writes one head's attention over the harvested sequence of one decoded
/// sample as a labeled CSV (query rows, key columns).
pub fn run_export_attention(
    cfg: &RunConfig,
    ds: &Dataset,
    ckpt: &Path,
    sample_id: &str,
    task: TaskKind,
    layer: usize,
    head: usize,
    out: &Path,
) -> Result<PathBuf> {
    if layer >= cfg.backbone.layers {
        return Err(TrainError::Config(format!(
            "layer {layer} outside the {}-layer backbone",
            cfg.backbone.layers
        )));
    }
    if head >= cfg.backbone.heads {
        return Err(TrainError::Config(format!(
            "head {head} outside the {}-head attention",
            cfg.backbone.heads
        )));
    }
    let sample = find_sample(ds, sample_id)?;
    let r = restore_tuned(cfg, ds, ckpt)?;
    let cases = r.assembler.eval_cases(sample, task, "attn")?;
    let case = cases.first().ok_or_else(|| {
        TrainError::Incompatible(format!("sample {sample_id:?} offers no {} case", task.name()))
    })?;
    let adapter = EvalAdapter {
        cfg: &cfg.adapter,
        weights: &r.tunable.adapter,
        seed: cfg.seed,
        tag: &case.tag,
    };
    let gen = greedy_generate(
        &r.backbone,
        Some(&r.tunable.task_rows),
        Some(&adapter),
        &case.prompt,
        cfg.eval.max_new,
    )?;
    let len = gen.image_len + gen.text_ids.len();
    let labels: Vec<String> = (0..len)
        .map(|p| {
            if p < gen.image_len {
                format!("patch{p}")
            } else {
                r.assembler.vocab.token(gen.text_ids[p - gen.image_len]).to_string()
            }
        })
        .collect();
    let attn = &gen.attn[layer];
    let mut csv = String::from("query");
    for l in &labels {
        csv.push(',');
        csv.push_str(l);
    }
    csv.push('\n');
    for q in 0..len {
        csv.push_str(&labels[q]);
        for v in attn.row(head * len + q) {
            csv.push(',');
            csv.push_str(&format!("{v}"));
        }
        csv.push('\n');
    }
    atomic_write(out, csv.as_bytes())?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataSection, EvalSection};
    use nt_model::heads::MaskDecoderConfig;

    /// Small enough to pretrain and tune in seconds.
    fn tiny_config(root: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data = DataSection {
            path: root.join("data").to_string_lossy().into_owned(),
            train: 6,
            val: 2,
            test: 2,
            max_objects: 3,
            refexps_per_scene: 2,
        };
        cfg.backbone.d_h = 32;
        cfg.backbone.heads = 2;
        cfg.backbone.max_len = 128;
        cfg.backbone.pretrain_steps = 3;
        cfg.adapter.d_z = 8;
        cfg.heads.d_c = 8;
        cfg.heads.decoder = MaskDecoderConfig { channels: 4, stages: 3, attn_blocks: 1 };
        cfg.heads.genar = crate::config::GenArSection {
            k: 8,
            patch: 8,
            layers: 1,
            d_h: 16,
            heads: 2,
            steps: 3,
            batch: 4,
            lr: 1e-3,
            ..Default::default()
        };
        cfg.train.epochs = 1;
        cfg.eval = EvalSection { split: "val".into(), max_new: 6 };
        cfg.validate().expect("tiny config validates");
        cfg
    }

    fn pipeline_through_tune(root: &Path) -> (RunConfig, Dataset, TuneOutcome) {
        let cfg = tiny_config(root);
        run_gen_data(&cfg, false).expect("gen-data");
        let ds = load_data(&cfg).expect("load");
        let results = root.join("results");
        let b = pretrain_backbone(&cfg, &ds, &results).expect("backbone stage");
        let g = pretrain_genar(&cfg, &ds, &results).expect("genar stage");
        let out = run_tune(&cfg, &ds, &b.path, &g.path, &results, false).expect("tune stage");
        (cfg, ds, out)
    }

    #[test]
    fn stages_chain_reuse_artifacts_and_restore_exactly() {
        let tmp = tempfile::tempdir().expect("tempdir");
        let (cfg, ds, out) = pipeline_through_tune(tmp.path());
        assert!(!out.reused);
        assert!(out.ckpt.is_file());
        assert!(out.dir.join("loss.csv").is_file());
        assert!(out.dir.join("metrics.json").is_file());

        // Every stage is keyed by its hash and reused on a second call.
        let results = tmp.path().join("results");
        assert!(pretrain_backbone(&cfg, &ds, &results).expect("backbone reuse").reused);
        assert!(pretrain_genar(&cfg, &ds, &results).expect("genar reuse").reused);
        let again = run_tune(
            &cfg,
            &ds,
            &backbone_ckpt_path(&cfg, &results),
            &genar_ckpt_path(&cfg, &results),
            &results,
            false,
        )
        .expect("tune reuse");
        assert!(again.reused);
        assert_eq!(again.metrics, out.metrics);

        // Restoring the self-contained checkpoint reproduces the eval split
        // metrics bit for bit.
        let (_, metrics) = run_eval(&cfg, &ds, &out.ckpt, "val").expect("eval");
        assert_eq!(metrics.tasks, out.metrics.tasks);
        assert!(out.dir.join("metrics-val.json").is_file());
    }

    #[test]
    fn mismatched_artifacts_are_rejected() {
        let tmp = tempfile::tempdir().expect("tempdir");
        let (cfg, ds, out) = pipeline_through_tune(tmp.path());
        let results = tmp.path().join("results");

        // A config with a different seed keys different artifacts; feeding
        // it the old ones must fail as incompatible, not silently retrain.
        let mut other = cfg.clone();
        other.seed = 7;
        let err = match run_tune(
            &other,
            &ds,
            &backbone_ckpt_path(&cfg, &results),
            &genar_ckpt_path(&cfg, &results),
            &results,
            false,
        ) {
            Err(e) => e,
            Ok(_) => panic!("stale backbone accepted"),
        };
        assert_eq!(err.exit_code(), 4);

        let err = match restore_tuned(&other, &ds, &out.ckpt) {
            Err(e) => e,
            Ok(_) => panic!("stale tuned checkpoint accepted"),
        };
        assert_eq!(err.exit_code(), 4);

        // Same-seed dataset mismatch: regenerate with different split sizes.
        let mut small = cfg.clone();
        small.data.train = 4;
        let err = load_data(&small).expect_err("split mismatch");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn inference_and_exports_write_their_artifacts() {
        let tmp = tempfile::tempdir().expect("tempdir");
        let (cfg, ds, out) = pipeline_through_tune(tmp.path());
        let sample_id = ds.val[0].id.clone();

        let infer_dir = tmp.path().join("infer");
        let res =
            run_infer(&cfg, &ds, &out.ckpt, &sample_id, TaskKind::RefSeg, &infer_dir).expect("infer");
        for f in &res.files {
            assert!(f.is_file());
        }

        let inspect = run_inspect(&cfg, &ds, &out.ckpt, &tmp.path().join("inspect")).expect("inspect");
        assert_eq!(inspect.len(), 2);
        let csv = std::fs::read_to_string(&inspect[0]).expect("csv");
        assert!(csv.starts_with("task,layer,neuron,frequency"));

        let attn_path = tmp.path().join("attn.csv");
        run_export_attention(&cfg, &ds, &out.ckpt, &sample_id, TaskKind::Caption, 0, 1, &attn_path)
            .expect("attention export");
        let attn = std::fs::read_to_string(&attn_path).expect("attn csv");
        let mut lines = attn.lines();
        let header = lines.next().expect("header");
        assert!(header.starts_with("query,patch0,"));
        let cols = header.split(',').count();
        for line in lines {
            let mut fields = line.split(',');
            let _label = fields.next().expect("row label");
            let row: Vec<f64> = fields.map(|v| v.parse().expect("probability")).collect();
            assert_eq!(row.len() + 1, cols);
            // Causal rows are distributions over the visible prefix.
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
        }

        let err = run_export_attention(&cfg, &ds, &out.ckpt, &sample_id, TaskKind::Caption, 9, 0, &attn_path)
            .expect_err("layer bound");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn adapter_count_matches_the_closed_form() {
        let tmp = tempfile::tempdir().expect("tempdir");
        let cfg = tiny_config(tmp.path());
        run_gen_data(&cfg, false).expect("gen-data");
        let ds = load_data(&cfg).expect("load");
        let backbone =
            BackboneWeights::init(cfg.backbone_config(ds.vocab.len()), cfg.seed).expect("backbone");
        let tunable = Tunable::init(&cfg, &backbone).expect("tunable");
        let b = trainable_breakdown(&backbone, &tunable);
        let sites = cfg.adapter.sites.order().len();
        assert_eq!(
            b.adapter,
            closed_form_adapter(cfg.backbone.layers, cfg.backbone.d_h, cfg.adapter.d_z, sites)
        );
        assert_eq!(b.task_rows, 9 * cfg.backbone.d_h);
        assert_eq!(b.gen_head, cfg.heads.d_c * cfg.backbone.d_h);
        assert_eq!(b.trainable, tunable.param_count());
        assert!(b.fraction > 0.0 && b.fraction < 1.0);
    }
}
