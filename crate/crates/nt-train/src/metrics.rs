//! Evaluation metrics. Segmentation quality is reported two ways: mIoU
//! averages per-instance IoU (so small and large objects weigh equally) and
//! oIoU pools intersections and unions over the whole split (so large
//! objects dominate). Caption quality pairs position-aligned token accuracy
//! with a 4-gram overlap score; generation quality is cosine alignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskPair {
    pub inter: usize,
    pub union: usize,
}

impl MaskPair {
    /// Per-instance IoU; two empty masks agree perfectly.
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        }
    }
}

pub fn mask_pair(pred: &[bool], gt: &[bool]) -> Result<MaskPair> {
    if pred.len() != gt.len() {
        return Err(TrainError::Incompatible(format!(
            "mask extents differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut pair = MaskPair::default();
    for (&p, &g) in pred.iter().zip(gt) {
        pair.inter += (p && g) as usize;
        pair.union += (p || g) as usize;
    }
    Ok(pair)
}

/// (mIoU, oIoU) over a split's instances. A split with no predicted mask at
/// all is a caller bug, not a metric value.
pub fn miou_oiou(pairs: &[MaskPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(TrainError::Incompatible("no mask instances to score".into()));
    }
    let miou = pairs.iter().map(|p| p.iou()).sum::<f64>() / pairs.len() as f64;
    let inter: usize = pairs.iter().map(|p| p.inter).sum();
    let union: usize = pairs.iter().map(|p| p.union).sum();
    let oiou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok((miou, oiou))
}

/// Position-aligned token matches over the longer of the two sequences, so
/// both over- and under-generation cost accuracy.
pub fn token_accuracy(generated: &[u32], reference: &[u32]) -> f64 {
    let longest = generated.len().max(reference.len());
    if longest == 0 {
        return 1.0;
    }
    let hits = generated.iter().zip(reference).filter(|(g, r)| g == r).count();
    hits as f64 / longest as f64
}

fn modified_precision(generated: &[u32], reference: &[u32], n: usize) -> (usize, usize) {
    if generated.len() < n {
        return (0, 0);
    }
    let mut ref_counts: BTreeMap<&[u32], usize> = BTreeMap::new();
    for gram in reference.windows(n) {
        *ref_counts.entry(gram).or_insert(0) += 1;
    }
    let mut hits = 0;
    for gram in generated.windows(n) {
        if let Some(c) = ref_counts.get_mut(gram) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    (hits, generated.len() - n + 1)
}

/// Geometric mean of clipped n-gram precisions for n = 1..4, scaled by the
/// brevity penalty exp(1 - r/c) when the candidate is shorter than the
/// reference. Any empty precision zeroes the score.
pub fn four_gram_overlap(generated: &[u32], reference: &[u32]) -> f64 {
    if generated.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (hits, total) = modified_precision(generated, reference, n);
        if hits == 0 {
            return 0.0;
        }
        log_sum += (hits as f64 / total as f64).ln();
    }
    let (c, r) = (generated.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

/// Per-task metric table; absent entries mean the task was not evaluated.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TaskMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oiou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub four_gram: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_cosine: Option<f64>,
    pub cases: usize,
}

impl TaskMetrics {
    /// One line of whichever scores the task produced.
    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                parts.push(format!("{name} {v:.4}"));
            }
        };
        push("miou", self.miou);
        push("oiou", self.oiou);
        push("token-acc", self.token_accuracy);
        push("4gram", self.four_gram);
        push("align", self.alignment_cosine);
        push("recon", self.reconstruction_cosine);
        parts.push(format!("cases {}", self.cases));
        parts.join(", ")
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub split: String,
    pub tasks: BTreeMap<String, TaskMetrics>,
    /// Signature overlap for every unordered task pair, keyed "a|b".
    pub jaccard: BTreeMap<String, f64>,
    /// Most frequently retained neurons per task, ascending indices.
    pub signatures: BTreeMap<String, Vec<usize>>,
}

impl Metrics {
    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("metrics serialize");
        bytes.push(b'\n');
        bytes
    }
}
