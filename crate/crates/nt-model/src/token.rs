//! Token layer: closed-world vocabulary with fixed special ids, the frozen
//! patch projection standing in for a vision encoder, and assembly of the
//! unified [patches][BOS][prompt][answer][EOS] sequence.

use nt_core::rng::{normal_tensor, stream};
use nt_core::{Scalar, Tensor};

use crate::error::{contract, ModelError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// <obj-1>..<obj-8> occupy ids 3..=10.
pub const OBJ_BASE: u32 = 3;
pub const MAX_OBJ: usize = 8;
pub const GEN: u32 = 11;
pub const SPECIALS: usize = 12;

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: std::collections::HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from an ordered token list. The first 12 entries must be the
    /// special tokens in their fixed order.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS {
            return Err(ModelError::Vocabulary(format!(
                "{} tokens cannot hold the {SPECIALS} specials",
                tokens.len()
            )));
        }
        let mut expected = vec!["<pad>".to_string(), "<bos>".into(), "<eos>".into()];
        for i in 1..=MAX_OBJ {
            expected.push(format!("<obj-{i}>"));
        }
        expected.push("<gen>".into());
        for (i, e) in expected.iter().enumerate() {
            if tokens[i] != *e {
                return Err(ModelError::Vocabulary(format!(
                    "special slot {i} holds {:?}, expected {e:?}",
                    tokens[i]
                )));
            }
        }
        let mut ids = std::collections::HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(ModelError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        Self::new(text.lines().filter(|l| !l.is_empty()).map(|l| l.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| ModelError::Vocabulary(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn obj_id(&self, index: usize) -> Result<u32> {
        if index == 0 || index > MAX_OBJ {
            return Err(ModelError::Vocabulary(format!("<obj-{index}> outside 1..={MAX_OBJ}")));
        }
        Ok(OBJ_BASE + index as u32 - 1)
    }
}

/// Frozen seeded linear projection of raster patches; the desk-scale stand-in
/// for a pretrained vision tower.
#[derive(Clone, Debug)]
pub struct PatchEmbedder<F: Scalar> {
    pub patch: usize,
    pub channels: usize,
    /// [D_h x patch*patch*channels], frozen.
    pub proj: Tensor<F>,
}

impl<F: Scalar> PatchEmbedder<F> {
    pub fn seeded(seed: u64, patch: usize, channels: usize, d_h: usize) -> Self {
        let mut rng = stream(seed, "patch-embedder");
        let dim = patch * patch * channels;
        // Variance scaled so embeddings land at unit-ish scale.
        let std = 1.0 / (dim as f64).sqrt();
        PatchEmbedder { patch, channels, proj: normal_tensor(&mut rng, &[d_h, dim], 0.0, std) }
    }

    /// Raster-order non-overlapping patches, each flattened then projected.
    /// Pixels are scaled to [0,1].
    pub fn embed(&self, image: &[u8], height: usize, width: usize) -> Result<Tensor<F>> {
        if height % self.patch != 0 || width % self.patch != 0 {
            return Err(contract(
                "embed_patches",
                format!("extent {height}x{width} not divisible by patch {}", self.patch),
            ));
        }
        if image.len() != height * width * self.channels {
            return Err(contract(
                "embed_patches",
                format!("image length {} != {height}*{width}*{}", image.len(), self.channels),
            ));
        }
        let (gh, gw) = (height / self.patch, width / self.patch);
        let dim = self.patch * self.patch * self.channels;
        let d_h = self.proj.shape()[0];
        let mut out = Vec::with_capacity(gh * gw * d_h);
        let mut flat = vec![F::zero(); dim];
        for pr in 0..gh {
            for pc in 0..gw {
                let mut idx = 0;
                for r in 0..self.patch {
                    for c in 0..self.patch {
                        let base = ((pr * self.patch + r) * width + pc * self.patch + c)
                            * self.channels;
                        for ch in 0..self.channels {
                            flat[idx] = F::from_f64(image[base + ch] as f64 / 255.0);
                            idx += 1;
                        }
                    }
                }
                for row in 0..d_h {
                    let w = &self.proj.data()[row * dim..(row + 1) * dim];
                    let mut acc = F::zero();
                    for (a, b) in w.iter().zip(flat.iter()) {
                        acc += *a * *b;
                    }
                    out.push(acc);
                }
            }
        }
        Tensor::new(&[gh * gw, d_h], out).map_err(ModelError::Tensor)
    }
}

/// Assembled model input. Text ids cover [BOS][prompt][answer][EOS]; the
/// optional patch block precedes them. The loss mask is true exactly on the
/// answer and EOS positions.
#[derive(Clone, Debug)]
pub struct TokenSequence<F: Scalar> {
    pub patches: Option<Tensor<F>>,
    pub text_ids: Vec<u32>,
    pub image_len: usize,
    pub prompt_len: usize,
    pub answer_len: usize,
    pub loss_mask: Vec<bool>,
}

impl<F: Scalar> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.image_len + self.text_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Span of the image block in overall positions.
    pub fn image_span(&self) -> (usize, usize) {
        (0, self.image_len)
    }

    /// Prompt ids (excluding BOS), as assembled.
    pub fn prompt_ids(&self) -> &[u32] {
        &self.text_ids[1..1 + self.prompt_len]
    }

    /// Answer ids (excluding EOS), as assembled.
    pub fn answer_ids(&self) -> &[u32] {
        &self.text_ids[1 + self.prompt_len..1 + self.prompt_len + self.answer_len]
    }

    /// Overall position of text index t.
    pub fn text_pos(&self, t: usize) -> usize {
        self.image_len + t
    }
}

/// Builds [patches][BOS][prompt][answer][EOS]. An empty answer leaves the
/// loss mask entirely false (inference mode: EOS is not appended).
pub fn assemble_input<F: Scalar>(
    patches: Option<Tensor<F>>,
    prompt_ids: &[u32],
    answer_ids: &[u32],
    max_len: usize,
) -> Result<TokenSequence<F>> {
    let image_len = patches.as_ref().map(|p| p.shape()[0]).or(Some(0)).unwrap();
    let with_eos = !answer_ids.is_empty();
    let text_len = 1 + prompt_ids.len() + answer_ids.len() + usize::from(with_eos);
    let total = image_len + text_len;
    if total > max_len {
        return Err(contract(
            "assemble_input",
            format!("sequence length {total} exceeds maximum {max_len}"),
        ));
    }
    let mut text_ids = Vec::with_capacity(text_len);
    text_ids.push(BOS);
    text_ids.extend_from_slice(prompt_ids);
    text_ids.extend_from_slice(answer_ids);
    if with_eos {
        text_ids.push(EOS);
    }
    let mut loss_mask = vec![false; total];
    if with_eos {
        for p in image_len + 1 + prompt_ids.len()..total {
            loss_mask[p] = true;
        }
    }
    Ok(TokenSequence {
        patches,
        text_ids,
        image_len,
        prompt_len: prompt_ids.len(),
        answer_len: answer_ids.len(),
        loss_mask,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskTokenKind {
    Obj,
    Gen,
}

/// Positions (within `ids`) of task tokens, with the <obj-i> index when
/// applicable (1 for <gen>). Positions are strictly increasing.
pub fn extract_task_tokens(ids: &[u32], kind: TaskTokenKind) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        match kind {
            TaskTokenKind::Obj => {
                if (OBJ_BASE..OBJ_BASE + MAX_OBJ as u32).contains(&id) {
                    out.push((pos, (id - OBJ_BASE) as usize + 1));
                }
            }
            TaskTokenKind::Gen => {
                if id == GEN {
                    out.push((pos, 1));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let mut toks: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eos>".into()];
        for i in 1..=8 {
            toks.push(format!("<obj-{i}>"));
        }
        toks.push("<gen>".into());
        for w in ["a", "red", "square", "segment", "the"] {
            toks.push(w.into());
        }
        Vocabulary::new(toks).unwrap()
    }

    #[test]
    fn special_ids_are_fixed() {
        let v = vocab();
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<bos>").unwrap(), BOS);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        assert_eq!(v.id("<obj-1>").unwrap(), 3);
        assert_eq!(v.id("<obj-8>").unwrap(), 10);
        assert_eq!(v.id("<gen>").unwrap(), GEN);
        assert_eq!(v.obj_id(3).unwrap(), 5);
        assert!(v.obj_id(9).is_err());
    }

    #[test]
    fn wrong_special_order_is_rejected() {
        let mut toks: Vec<String> = vec!["<bos>".into(), "<pad>".into(), "<eos>".into()];
        for i in 1..=8 {
            toks.push(format!("<obj-{i}>"));
        }
        toks.push("<gen>".into());
        assert!(Vocabulary::new(toks).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = vocab();
        let ids = v.encode("segment the red square").unwrap();
        assert_eq!(v.decode(&ids), "segment the red square");
        assert!(v.encode("segment the blue square").is_err());
    }

    #[test]
    fn text_only_assembly_layout() {
        let seq = assemble_input::<f32>(None, &[20, 21, 22], &[3, 2], 64).unwrap();
        assert_eq!(seq.len(), 7);
        assert_eq!(seq.text_ids, vec![BOS, 20, 21, 22, 3, 2, EOS]);
        assert_eq!(seq.loss_mask.iter().filter(|&&m| m).count(), 3);
        assert!(!seq.loss_mask[..4].iter().any(|&m| m));
        assert_eq!(seq.prompt_ids(), &[20, 21, 22]);
        assert_eq!(seq.answer_ids(), &[3, 2]);
    }

    #[test]
    fn patch_assembly_layout() {
        let patches = Tensor::<f32>::zeros(&[4, 8]);
        let seq = assemble_input(Some(patches), &[20, 21, 22], &[3, 2], 64).unwrap();
        assert_eq!(seq.len(), 11);
        assert_eq!(seq.image_span(), (0, 4));
        // Mask never covers image or prompt positions.
        assert!(!seq.loss_mask[..8].iter().any(|&m| m));
        assert!(seq.loss_mask[8..].iter().all(|&m| m));
    }

    #[test]
    fn empty_answer_has_no_loss_positions() {
        let seq = assemble_input::<f32>(None, &[20], &[], 64).unwrap();
        assert!(seq.loss_mask.iter().all(|&m| !m));
        assert_eq!(*seq.text_ids.last().unwrap(), 20);
    }

    #[test]
    fn overlength_is_an_error() {
        assert!(assemble_input::<f32>(None, &[20; 10], &[21; 10], 12).is_err());
    }

    #[test]
    fn task_token_extraction() {
        let ids = vec![BOS, 20, OBJ_BASE, 21, OBJ_BASE + 2, EOS];
        assert_eq!(
            extract_task_tokens(&ids, TaskTokenKind::Obj),
            vec![(2, 1), (4, 3)]
        );
        assert_eq!(extract_task_tokens(&ids, TaskTokenKind::Gen), vec![]);
        assert_eq!(extract_task_tokens(&[GEN], TaskTokenKind::Gen), vec![(0, 1)]);
    }

    #[test]
    fn patch_embedding_matches_direct_projection() {
        let e = PatchEmbedder::<f64>::seeded(5, 4, 3, 6);
        // 8x8 image, patch 4 -> 4 patches.
        let mut image = vec![0u8; 8 * 8 * 3];
        image[0] = 255; // single hot component in patch 0
        let out = e.embed(&image, 8, 8).unwrap();
        assert_eq!(out.shape(), &[4, 6]);
        // Patch 0 embedding = first projection column exactly.
        let dim = 4 * 4 * 3;
        for row in 0..6 {
            let expected = e.proj.data()[row * dim];
            assert!((out.get2(0, row) - expected).abs() < 1e-12);
        }
        // Zero patches embed to zero (no bias).
        for p in 1..4 {
            for row in 0..6 {
                assert_eq!(out.get2(p, row), 0.0);
            }
        }
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let e = PatchEmbedder::<f32>::seeded(5, 5, 3, 4);
        assert!(e.embed(&[0; 8 * 8 * 3], 8, 8).is_err());
    }
}
