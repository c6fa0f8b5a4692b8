//! Turns dataset samples into model-ready sequences. Training instances
//! carry teacher-forced answers plus the positions where task-token hiddens
//! are harvested for the heads; eval cases carry the bare prompt and the
//! references to score against.

use nt_core::Tensor;
use nt_mmud::{rle_decode, Sample, CHANNELS, GRID};
use nt_model::synth::ConditionEncoder;
use nt_model::token::{
    assemble_input, extract_task_tokens, PatchEmbedder, TaskTokenKind, TokenSequence, Vocabulary,
    GEN,
};

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskKind {
    RefSeg,
    ReaSeg,
    Caption,
    Gen,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::RefSeg, TaskKind::ReaSeg, TaskKind::Caption, TaskKind::Gen];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::RefSeg => "refseg",
            TaskKind::ReaSeg => "reaseg",
            TaskKind::Caption => "caption",
            TaskKind::Gen => "gen",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// Teacher-forced training instance. Mask and gen positions index the full
/// sequence (image block included) at the ground-truth task tokens.
pub struct Instance {
    pub task: TaskKind,
    pub seq: TokenSequence<f64>,
    /// (position, ground-truth mask [cells x 1]) per <obj-i> in the answer.
    pub masks: Vec<(usize, Tensor<f64>)>,
    /// (position, target condition [1 x d_c]) for the <gen> token.
    pub gen: Option<(usize, Tensor<f64>)>,
}

/// One scored decode: prompt in, greedy answer out, judged against the
/// reference tokens, ground-truth masks (keyed by object index) or the
/// target condition.
pub struct EvalCase {
    pub task: TaskKind,
    pub prompt: TokenSequence<f64>,
    pub reference: Vec<u32>,
    /// (1-based object index, ground-truth cells) per expected mask.
    pub gt_marks: Vec<(usize, Vec<bool>)>,
    pub gen_target: Option<Tensor<f64>>,
    pub tag: String,
}

/// Shared sequence builder: fixed vocabulary, frozen patch projection,
/// frozen condition encoder, and the mask raster geometry.
pub struct Assembler {
    pub vocab: Vocabulary,
    pub embedder: PatchEmbedder<f64>,
    pub cond: ConditionEncoder<f64>,
    pub max_len: usize,
    /// Side of the decoder output raster the ground truth is resampled to.
    pub mask_side: usize,
}

impl Assembler {
    pub fn new(
        vocab_tokens: &[String],
        seed: u64,
        patch: usize,
        d_h: usize,
        d_c: usize,
        max_len: usize,
        mask_side: usize,
    ) -> Result<Self> {
        if mask_side == 0 || GRID % mask_side != 0 {
            return Err(TrainError::Config(format!("mask side {mask_side} must divide {GRID}")));
        }
        Ok(Assembler {
            vocab: Vocabulary::new(vocab_tokens.to_vec())?,
            embedder: PatchEmbedder::seeded(seed, patch, CHANNELS, d_h),
            cond: ConditionEncoder::new(GRID, d_c, seed)?,
            max_len,
            mask_side,
        })
    }

    /// Ground truth resampled to the decoder raster: a block counts as
    /// foreground when at least half of its native cells are.
    pub fn downsample_mask(&self, rle: &[u32]) -> Result<Vec<bool>> {
        let native = rle_decode(rle, GRID * GRID)
            .map_err(|m| TrainError::Incompatible(format!("mask rle: {m}")))?;
        let f = GRID / self.mask_side;
        let mut out = vec![false; self.mask_side * self.mask_side];
        for (i, cell) in out.iter_mut().enumerate() {
            let (br, bc) = (i / self.mask_side, i % self.mask_side);
            let mut ones = 0;
            for r in 0..f {
                for c in 0..f {
                    ones += native[(br * f + r) * GRID + bc * f + c] as usize;
                }
            }
            *cell = 2 * ones >= f * f;
        }
        Ok(out)
    }

    fn mask_tensor(cells: &[bool]) -> Tensor<f64> {
        let data = cells.iter().map(|&b| f64::from(u8::from(b))).collect();
        Tensor::new(&[cells.len(), 1], data).expect("mask tensor shape")
    }

    fn patches(&self, sample: &Sample) -> Result<Tensor<f64>> {
        Ok(self.embedder.embed(&sample.image, GRID, GRID)?)
    }

    /// (prompt ids, answer ids, per-answer-marker masks, needs patches) for
    /// one task view of a sample; None when the sample lacks the task.
    fn task_text(
        &self,
        sample: &Sample,
        task: TaskKind,
        variant: usize,
    ) -> Result<Option<(Vec<u32>, Vec<u32>)>> {
        let v = &self.vocab;
        Ok(match task {
            TaskKind::RefSeg => {
                let r = &sample.refexp[variant % sample.refexp.len()];
                let mut prompt = v.encode(nt_mmud::lang::PROMPT_SEGMENT)?;
                prompt.extend(v.encode(&r.expression)?);
                Some((prompt, vec![v.obj_id(r.obj_id)?]))
            }
            TaskKind::ReaSeg => match &sample.reasoning {
                Some(q) => Some((v.encode(&q.question)?, v.encode(&q.answer)?)),
                None => None,
            },
            TaskKind::Caption => {
                Some((v.encode(nt_mmud::lang::PROMPT_DESCRIBE)?, v.encode(&sample.caption)?))
            }
            TaskKind::Gen => {
                let mut prompt = v.encode(nt_mmud::lang::PROMPT_GENERATE)?;
                prompt.extend(v.encode(&sample.caption)?);
                Some((prompt, vec![GEN]))
            }
        })
    }

    /// Positions of the answer's <obj-i> tokens in the assembled sequence,
    /// paired with the ground-truth mask tensors they supervise.
    fn answer_marks(&self, sample: &Sample, seq: &TokenSequence<f64>) -> Result<Vec<(usize, Tensor<f64>)>> {
        let mut out = Vec::new();
        for (idx, obj) in extract_task_tokens(seq.answer_ids(), TaskTokenKind::Obj) {
            let rle = sample.masks.get(obj - 1).ok_or_else(|| {
                TrainError::Incompatible(format!("{}: <obj-{obj}> has no mask", sample.id))
            })?;
            let cells = self.downsample_mask(rle)?;
            out.push((seq.text_pos(1 + seq.prompt_len + idx), Self::mask_tensor(&cells)));
        }
        Ok(out)
    }

    /// Teacher-forced instance, or None when the sample lacks the task.
    /// `variant` rotates referring expressions across epochs.
    pub fn train_instance(
        &self,
        sample: &Sample,
        task: TaskKind,
        variant: usize,
    ) -> Result<Option<Instance>> {
        let Some((prompt, answer)) = self.task_text(sample, task, variant)? else {
            return Ok(None);
        };
        let patches = match task {
            TaskKind::Gen => None,
            _ => Some(self.patches(sample)?),
        };
        let seq = assemble_input(patches, &prompt, &answer, self.max_len)?;
        let masks = match task {
            TaskKind::RefSeg | TaskKind::ReaSeg => self.answer_marks(sample, &seq)?,
            _ => Vec::new(),
        };
        let gen = match task {
            TaskKind::Gen => {
                let (idx, _) = extract_task_tokens(seq.answer_ids(), TaskTokenKind::Gen)[0];
                let target = self.cond.encode(&sample.image)?;
                Some((seq.text_pos(1 + seq.prompt_len + idx), target))
            }
            _ => None,
        };
        Ok(Some(Instance { task, seq, masks, gen }))
    }

    /// Every eval view of a sample under a task: one per referring
    /// expression, at most one otherwise.
    pub fn eval_cases(&self, sample: &Sample, task: TaskKind, split: &str) -> Result<Vec<EvalCase>> {
        let variants = match task {
            TaskKind::RefSeg => sample.refexp.len(),
            _ => 1,
        };
        let mut out = Vec::new();
        for variant in 0..variants {
            let Some((prompt_ids, answer)) = self.task_text(sample, task, variant)? else {
                continue;
            };
            let patches = match task {
                TaskKind::Gen => None,
                _ => Some(self.patches(sample)?),
            };
            let prompt = assemble_input(patches, &prompt_ids, &[], self.max_len)?;
            let mut gt_marks = Vec::new();
            for (_, obj) in extract_task_tokens(&answer, TaskTokenKind::Obj) {
                let rle = sample.masks.get(obj - 1).ok_or_else(|| {
                    TrainError::Incompatible(format!("{}: <obj-{obj}> has no mask", sample.id))
                })?;
                gt_marks.push((obj, self.downsample_mask(rle)?));
            }
            let gen_target = match task {
                TaskKind::Gen => Some(self.cond.encode(&sample.image)?),
                _ => None,
            };
            out.push(EvalCase {
                task,
                prompt,
                reference: answer,
                gt_marks,
                gen_target,
                tag: format!("{split}/{}/{}/{variant}", sample.id, task.name()),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nt_model::token::{BOS, EOS, OBJ_BASE};

    fn tiny_dataset() -> nt_mmud::Dataset {
        let dir = tempfile::tempdir().unwrap();
        nt_mmud::generate_dataset(
            dir.path(),
            &nt_mmud::GenConfig { train: 6, val: 2, test: 2, ..nt_mmud::GenConfig::default() },
            9,
        )
        .unwrap();
        nt_mmud::load_dataset(dir.path()).unwrap()
    }

    fn assembler(ds: &nt_mmud::Dataset) -> Assembler {
        Assembler::new(&ds.vocab, 42, 16, 64, 64, 256, 16).unwrap()
    }

    #[test]
    fn task_names_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(TaskKind::parse(t.name()), Some(t));
        }
        assert_eq!(TaskKind::parse("refseg2"), None);
    }

    #[test]
    fn downsample_majority_votes_blocks() {
        let ds = tiny_dataset();
        let a = assembler(&ds);
        // All-ones raster stays all ones; all-zeros stays empty.
        assert!(a.downsample_mask(&[1, (GRID * GRID) as u32]).unwrap().iter().all(|&b| b));
        assert!(a.downsample_mask(&[0, (GRID * GRID) as u32]).unwrap().iter().all(|&b| !b));
        // Exactly half a 2x2 block (one column of the two) meets the >= 1/2 rule.
        let mut native = vec![0u8; GRID * GRID];
        native[0] = 1;
        native[GRID] = 1;
        let rle = nt_mmud::rle_encode(&native);
        let down = a.downsample_mask(&rle).unwrap();
        assert!(down[0]);
        assert_eq!(down.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn refseg_instance_places_the_marker_after_the_expression() {
        let ds = tiny_dataset();
        let a = assembler(&ds);
        let s = &ds.train[0];
        let inst = a.train_instance(s, TaskKind::RefSeg, 0).unwrap().unwrap();
        assert_eq!(inst.seq.image_len, 4);
        assert_eq!(inst.masks.len(), 1);
        let obj = s.refexp[0].obj_id;
        let (pos, gt) = &inst.masks[0];
        // The marker is the single answer token right before EOS.
        assert_eq!(*pos, inst.seq.len() - 2);
        assert_eq!(
            inst.seq.text_ids[pos - inst.seq.image_len],
            OBJ_BASE + obj as u32 - 1
        );
        assert_eq!(gt.shape(), &[256, 1]);
        assert_eq!(*inst.seq.text_ids.last().unwrap(), EOS);
        // Variants rotate the expression.
        if s.refexp.len() > 1 {
            let inst1 = a.train_instance(s, TaskKind::RefSeg, 1).unwrap().unwrap();
            assert_ne!(inst1.seq.text_ids, inst.seq.text_ids);
        }
    }

    #[test]
    fn reaseg_marks_every_answer_marker() {
        let ds = tiny_dataset();
        let a = assembler(&ds);
        let s = ds.train.iter().find(|s| s.reasoning.is_some()).unwrap();
        let q = s.reasoning.as_ref().unwrap();
        let inst = a.train_instance(s, TaskKind::ReaSeg, 0).unwrap().unwrap();
        assert_eq!(inst.masks.len(), q.obj_ids.len());
        for (pos, _) in &inst.masks {
            let id = inst.seq.text_ids[pos - inst.seq.image_len];
            assert!(extract_task_tokens(&[id], TaskTokenKind::Obj).len() == 1);
        }
    }

    #[test]
    fn gen_instance_has_no_patches_and_a_unit_target() {
        let ds = tiny_dataset();
        let a = assembler(&ds);
        let s = &ds.train[0];
        let inst = a.train_instance(s, TaskKind::Gen, 0).unwrap().unwrap();
        assert!(inst.seq.patches.is_none());
        assert!(inst.masks.is_empty());
        let (pos, target) = inst.gen.as_ref().unwrap();
        assert_eq!(inst.seq.text_ids[*pos], GEN);
        let norm: f64 = target.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn caption_supervises_the_whole_caption() {
        let ds = tiny_dataset();
        let a = assembler(&ds);
        let s = &ds.train[0];
        let inst = a.train_instance(s, TaskKind::Caption, 0).unwrap().unwrap();
        let want = a.vocab.encode(&s.caption).unwrap();
        assert_eq!(inst.seq.answer_ids(), &want[..]);
        assert!(inst.masks.is_empty() && inst.gen.is_none());
    }

    #[test]
    fn eval_cases_cover_every_refexp_with_bare_prompts() {
        let ds = tiny_dataset();
        let a = assembler(&ds);
        let s = &ds.train[0];
        let cases = a.eval_cases(s, TaskKind::RefSeg, "val").unwrap();
        assert_eq!(cases.len(), s.refexp.len());
        for (i, c) in cases.iter().enumerate() {
            assert!(c.prompt.loss_mask.iter().all(|&m| !m));
            assert_eq!(*c.prompt.text_ids.first().unwrap(), BOS);
            assert_ne!(*c.prompt.text_ids.last().unwrap(), EOS);
            assert_eq!(c.gt_marks.len(), 1);
            assert_eq!(c.gt_marks[0].0, s.refexp[i].obj_id);
            assert_eq!(c.reference, vec![OBJ_BASE + s.refexp[i].obj_id as u32 - 1]);
            assert_eq!(c.tag, format!("val/{}/refseg/{i}", s.id));
        }
        let no_reason = ds.train.iter().find(|s| s.reasoning.is_none());
        if let Some(s) = no_reason {
            assert!(a.eval_cases(s, TaskKind::ReaSeg, "val").unwrap().is_empty());
        }
    }
}
