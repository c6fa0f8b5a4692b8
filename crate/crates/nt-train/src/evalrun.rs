//! Evaluation: greedy decoding per case, task-specific scoring, and the
//! neuron-retention bookkeeping behind the overlap analysis. Cases evaluate
//! independently (and in parallel with the `parallel` feature); reduction
//! runs in case order so the metrics are bit-stable either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use nt_core::{Graph, Tensor};
use nt_mmud::{Sample, GRID};
use nt_model::backbone::{greedy_generate, BackboneWeights, EvalAdapter, Generated};
use nt_model::heads::{decode_mask, MASK_THRESHOLD};
use nt_model::sparse::ActivationStats;
use nt_model::synth::{cosine, generate_indices, Codebook, GenArWeights};
use nt_model::token::{extract_task_tokens, TaskTokenKind};

use crate::assemble::{Assembler, EvalCase, TaskKind};
use crate::config::RunConfig;
use crate::error::{Result, TrainError};
use crate::metrics::{four_gram_overlap, mask_pair, miou_oiou, token_accuracy, MaskPair, Metrics, TaskMetrics};
use crate::tune::Tunable;

/// Frozen image-synthesis stack used for the reconstruction score.
pub struct GenStack {
    pub codebook: Codebook,
    pub genar: GenArWeights<f64>,
}

struct CaseOutcome {
    task: TaskKind,
    retained: Vec<Vec<bool>>,
    pairs: Vec<MaskPair>,
    token_acc: Option<f64>,
    four_gram: Option<f64>,
    align: Option<f64>,
    recon: Option<f64>,
}

/// Rows `lo..hi` of a row-major matrix as their own tensor.
pub(crate) fn rows(t: &Tensor<f64>, lo: usize, hi: usize) -> Tensor<f64> {
    let w = t.shape()[1];
    Tensor::new(&[hi - lo, w], t.data()[lo * w..hi * w].to_vec()).expect("row slice shape")
}

/// Thresholded mask decoded from the harvested hidden states at `pos`.
pub(crate) fn decode_at(tunable: &Tunable, gen: &Generated<f64>, pos: usize) -> Result<Vec<bool>> {
    let mut g = Graph::new();
    let nodes = tunable.decoder.insert(&mut g, false);
    let image = g.constant(rows(&gen.final_hidden, 0, gen.image_len));
    let obj = g.constant(rows(&gen.final_hidden, pos, pos + 1));
    let probs = decode_mask(&mut g, &tunable.decoder, &nodes, image, obj)?;
    Ok(g.value(probs).data().iter().map(|&p| p >= MASK_THRESHOLD).collect())
}

/// Position of answer token `ai` in the harvested sequence.
pub(crate) fn answer_pos(case: &EvalCase, gen: &Generated<f64>, ai: usize) -> usize {
    gen.image_len + 1 + case.prompt.prompt_len + ai
}

pub(crate) fn gen_head_predict(tunable: &Tunable, hidden: &[f64]) -> Tensor<f64> {
    let w = &tunable.gen.w;
    let d_c = w.shape()[0];
    let data: Vec<f64> = (0..d_c)
        .map(|r| w.row(r).iter().zip(hidden).map(|(&a, &b)| a * b).sum())
        .collect();
    Tensor::new(&[1, d_c], data).expect("gen prediction shape")
}

fn score_case(
    cfg: &RunConfig,
    backbone: &BackboneWeights<f64>,
    tunable: &Tunable,
    assembler: &Assembler,
    genstack: Option<&GenStack>,
    case: &EvalCase,
) -> Result<CaseOutcome> {
    let adapter = EvalAdapter {
        cfg: &cfg.adapter,
        weights: &tunable.adapter,
        seed: cfg.seed,
        tag: &case.tag,
    };
    let gen = greedy_generate(
        backbone,
        Some(&tunable.task_rows),
        Some(&adapter),
        &case.prompt,
        cfg.eval.max_new,
    )?;
    let mut out = CaseOutcome {
        task: case.task,
        retained: gen.retained.clone(),
        pairs: Vec::new(),
        token_acc: None,
        four_gram: None,
        align: None,
        recon: None,
    };
    match case.task {
        TaskKind::RefSeg | TaskKind::ReaSeg => {
            let emitted = extract_task_tokens(&gen.answer, TaskTokenKind::Obj);
            for (obj, gt) in &case.gt_marks {
                // The prediction for ground-truth object g comes from the
                // first emitted <obj-g>; a miss scores an empty mask.
                let pred = match emitted.iter().find(|(_, o)| o == obj) {
                    Some(&(ai, _)) => decode_at(tunable, &gen, answer_pos(case, &gen, ai))?,
                    None => vec![false; gt.len()],
                };
                out.pairs.push(mask_pair(&pred, gt)?);
            }
        }
        TaskKind::Caption => {
            out.token_acc = Some(token_accuracy(&gen.answer, &case.reference));
            out.four_gram = Some(four_gram_overlap(&gen.answer, &case.reference));
        }
        TaskKind::Gen => {
            let target = case.gen_target.as_ref().expect("gen case carries a target");
            let emitted = extract_task_tokens(&gen.answer, TaskTokenKind::Gen);
            match emitted.first() {
                Some(&(ai, _)) => {
                    let pos = answer_pos(case, &gen, ai);
                    let pred = gen_head_predict(tunable, gen.final_hidden.row(pos));
                    out.align = Some(cosine(&pred, target));
                    if let Some(stack) = genstack {
                        let norm: f64 =
                            pred.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                        let unit = if norm > 0.0 {
                            let data = pred.data().iter().map(|v| v / norm).collect();
                            Tensor::new(&[1, pred.shape()[1]], data).expect("unit shape")
                        } else {
                            pred.clone()
                        };
                        let indices = generate_indices(&stack.genar, &unit)?;
                        let image = stack.codebook.decode(&indices, GRID)?;
                        let recon_cond = assembler.cond.encode(&image)?;
                        out.recon = Some(cosine(&recon_cond, target));
                    }
                }
                None => {
                    out.align = Some(0.0);
                    if genstack.is_some() {
                        out.recon = Some(0.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores a split with greedy decoding. Returns the per-task metric table
/// (with signature overlaps) and the raw activation statistics.
pub fn evaluate(
    cfg: &RunConfig,
    backbone: &BackboneWeights<f64>,
    tunable: &Tunable,
    assembler: &Assembler,
    genstack: Option<&GenStack>,
    samples: &[Sample],
    split: &str,
) -> Result<(Metrics, ActivationStats)> {
    if samples.is_empty() {
        return Err(TrainError::MissingInput(format!("split {split:?} has no samples")));
    }
    let tasks = cfg.tasks();
    let mut cases = Vec::new();
    for &task in &tasks {
        let before = cases.len();
        for sample in samples {
            cases.extend(assembler.eval_cases(sample, task, split)?);
        }
        if cases.len() == before {
            log::warn!("split {split}: no {} cases; task skipped", task.name());
        }
    }

    #[cfg(feature = "parallel")]
    let outcomes: Vec<Result<CaseOutcome>> = cases
        .par_iter()
        .map(|c| score_case(cfg, backbone, tunable, assembler, genstack, c))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Result<CaseOutcome>> = cases
        .iter()
        .map(|c| score_case(cfg, backbone, tunable, assembler, genstack, c))
        .collect();

    let task_names: Vec<&str> = tasks.iter().map(|t| t.name()).collect();
    let mut stats = ActivationStats::new(&task_names, backbone.cfg.layers, cfg.adapter.d_z);
    let mut pairs: Vec<Vec<MaskPair>> = vec![Vec::new(); tasks.len()];
    let mut accs: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut grams: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut aligns: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut recons: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut counts = vec![0usize; tasks.len()];
    for outcome in outcomes {
        let o = outcome?;
        let ti = tasks.iter().position(|&t| t == o.task).expect("task from the mix");
        stats.record(ti, &o.retained)?;
        counts[ti] += 1;
        pairs[ti].extend(o.pairs);
        accs[ti].extend(o.token_acc);
        grams[ti].extend(o.four_gram);
        aligns[ti].extend(o.align);
        recons[ti].extend(o.recon);
    }

    let mut metrics = Metrics { split: split.to_string(), ..Metrics::default() };
    for (ti, &task) in tasks.iter().enumerate() {
        if counts[ti] == 0 {
            continue;
        }
        let mut tm = TaskMetrics { cases: counts[ti], ..TaskMetrics::default() };
        if !pairs[ti].is_empty() {
            let (m, o) = miou_oiou(&pairs[ti])?;
            tm.miou = Some(m);
            tm.oiou = Some(o);
        }
        if !accs[ti].is_empty() {
            tm.token_accuracy = Some(mean(&accs[ti]));
            tm.four_gram = Some(mean(&grams[ti]));
        }
        if !aligns[ti].is_empty() {
            tm.alignment_cosine = Some(mean(&aligns[ti]));
        }
        if !recons[ti].is_empty() {
            tm.reconstruction_cosine = Some(mean(&recons[ti]));
        }
        metrics.tasks.insert(task.name().to_string(), tm);
    }

    let top_n = (cfg.adapter.beta * cfg.adapter.d_z as f64).ceil() as usize;
    let matrix = stats.jaccard_matrix(top_n);
    for i in 0..tasks.len() {
        metrics
            .signatures
            .insert(tasks[i].name().to_string(), stats.signature(i, top_n));
        for j in i + 1..tasks.len() {
            metrics
                .jaccard
                .insert(format!("{}|{}", tasks[i].name(), tasks[j].name()), matrix[i][j]);
        }
    }
    Ok((metrics, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nt_model::backbone::BackboneConfig;

    fn setup() -> (RunConfig, BackboneWeights<f64>, Tunable, Assembler, Vec<Sample>) {
        let dir = tempfile::tempdir().unwrap();
        nt_mmud::generate_dataset(
            dir.path(),
            &nt_mmud::GenConfig { train: 3, val: 3, test: 1, ..nt_mmud::GenConfig::default() },
            13,
        )
        .unwrap();
        let ds = nt_mmud::load_dataset(dir.path()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.backbone.d_h = 32;
        cfg.backbone.heads = 2;
        cfg.adapter.d_z = 8;
        cfg.heads.decoder.channels = 4;
        cfg.heads.decoder.attn_blocks = 1;
        cfg.heads.d_c = 8;
        cfg.eval.max_new = 8;
        let bcfg = BackboneConfig {
            layers: 2,
            d_h: 32,
            heads: 2,
            vocab: ds.vocab.len(),
            max_len: 128,
        };
        let backbone = BackboneWeights::init(bcfg, cfg.seed).unwrap();
        let tunable = Tunable::init(&cfg, &backbone).unwrap();
        let assembler = Assembler::new(&ds.vocab, cfg.seed, 16, 32, 8, 128, 16).unwrap();
        (cfg, backbone, tunable, assembler, ds.val)
    }

    #[test]
    fn empty_split_is_an_error() {
        let (cfg, backbone, tunable, assembler, _) = setup();
        let err = evaluate(&cfg, &backbone, &tunable, &assembler, None, &[], "val").unwrap_err();
        assert!(matches!(err, TrainError::MissingInput(_)));
    }

    #[test]
    fn evaluation_is_pure_and_fills_every_task() {
        let (cfg, backbone, tunable, assembler, samples) = setup();
        let (m1, s1) = evaluate(&cfg, &backbone, &tunable, &assembler, None, &samples, "val").unwrap();
        let (m2, _) = evaluate(&cfg, &backbone, &tunable, &assembler, None, &samples, "val").unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.split, "val");
        for t in ["refseg", "caption", "gen"] {
            assert!(m1.tasks.contains_key(t), "missing {t}");
        }
        let refseg = &m1.tasks["refseg"];
        assert!(refseg.miou.unwrap() >= 0.0 && refseg.miou.unwrap() <= 1.0);
        assert!(refseg.oiou.unwrap() >= 0.0 && refseg.oiou.unwrap() <= 1.0);
        assert!(refseg.cases >= samples.len());
        let caption = &m1.tasks["caption"];
        assert!(caption.token_accuracy.is_some() && caption.four_gram.is_some());
        let gen = &m1.tasks["gen"];
        assert!(gen.alignment_cosine.is_some());
        // No generator stack: no reconstruction score.
        assert!(gen.reconstruction_cosine.is_none());
        // Jaccard entries exist for each unordered pair in the mix order.
        assert!(m1.jaccard.contains_key("refseg|gen") || m1.jaccard.contains_key("refseg|reaseg"));
        for (_, v) in &m1.jaccard {
            assert!(*v >= 0.0 && *v <= 1.0);
        }
        // The stats recorded one pass per case.
        let total: u64 = (0..s1.tasks.len()).map(|t| s1.passes(t)).sum();
        let case_total: usize = m1.tasks.values().map(|t| t.cases).sum();
        assert_eq!(total, case_total as u64);
    }

    #[test]
    fn signatures_have_the_expected_width() {
        let (cfg, backbone, tunable, assembler, samples) = setup();
        let (m, _) = evaluate(&cfg, &backbone, &tunable, &assembler, None, &samples, "val").unwrap();
        let top_n = (cfg.adapter.beta * cfg.adapter.d_z as f64).ceil() as usize;
        for (task, sig) in &m.signatures {
            assert_eq!(sig.len(), top_n, "{task}");
            assert!(sig.windows(2).all(|w| w[0] < w[1]), "{task} not ascending");
        }
    }
}
