//! Discrete image synthesis: a k-means patch codebook turns images into
//! short index sequences, a frozen condition encoder summarizes images as
//! unit vectors, and a small conditional autoregressive transformer maps a
//! condition prefix to codebook indices.

use serde::{Deserialize, Serialize};

use nt_core::optim::{cosine_lr, Adam};
use nt_core::rng::{normal_tensor, stream};
use nt_core::{argmax, Graph, NodeId, Scalar, Tensor};

use crate::backbone::{layer_forward, LayerNodes, LayerWeights};
use crate::error::{contract, ModelError, Result};

/// Flattened pixel values of one square patch, scaled to [0,1], channel
/// interleaved in row-major order.
fn patch_vector(image: &[u8], side: usize, patch: usize, pr: usize, pc: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(patch * patch * 3);
    for r in 0..patch {
        for c in 0..patch {
            let base = ((pr * patch + r) * side + pc * patch + c) * 3;
            for ch in 0..3 {
                v.push(image[base + ch] as f64 / 255.0);
            }
        }
    }
    v
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// K-means patch codebook over non-overlapping square patches.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub patch: usize,
    /// [k x patch*patch*3], values in [0,1].
    pub centroids: Tensor<f64>,
}

impl Codebook {
    pub fn grid(&self, side: usize) -> usize {
        side / self.patch
    }

    pub fn len(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fits k centroids with seeded farthest-point-weighted initialization
    /// and at most 50 Lloyd iterations. Errors when the images hold fewer
    /// distinct patches than k.
    pub fn fit(images: &[&[u8]], side: usize, patch: usize, k: usize, seed: u64) -> Result<Self> {
        if side % patch != 0 || patch == 0 {
            return Err(contract("codebook_fit", format!("patch {patch} must divide side {side}")));
        }
        if k == 0 {
            return Err(contract("codebook_fit", "k must be positive"));
        }
        let g = side / patch;
        let mut points: Vec<Vec<f64>> = Vec::new();
        for img in images {
            if img.len() != side * side * 3 {
                return Err(contract("codebook_fit", "image byte length mismatch"));
            }
            for pr in 0..g {
                for pc in 0..g {
                    points.push(patch_vector(img, side, patch, pr, pc));
                }
            }
        }
        let mut distinct: Vec<&Vec<f64>> = Vec::new();
        {
            let mut seen = std::collections::BTreeSet::new();
            for p in &points {
                let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
                if seen.insert(key) {
                    distinct.push(p);
                }
            }
        }
        if distinct.len() < k {
            return Err(contract(
                "codebook_fit",
                format!("{} distinct patches cannot support {k} centroids", distinct.len()),
            ));
        }

        // Weighted farthest-point seeding over the distinct patches.
        let mut rng = stream(seed, "codebook/init");
        let first = rand::Rng::gen_range(&mut rng, 0..distinct.len());
        let mut centroids: Vec<Vec<f64>> = vec![distinct[first].clone()];
        let mut best_d: Vec<f64> = distinct.iter().map(|p| sq_dist(p, &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = best_d.iter().sum();
            let pick = if total <= 0.0 {
                // All remaining mass sits on the chosen centroids; take the
                // first uncovered distinct patch.
                best_d.iter().position(|&d| d > 0.0).unwrap_or(0)
            } else {
                let mut target = rand::Rng::gen_range(&mut rng, 0.0..total);
                let mut chosen = 0;
                for (i, &d) in best_d.iter().enumerate() {
                    target -= d;
                    if target <= 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            };
            let c = distinct[pick].clone();
            for (i, p) in distinct.iter().enumerate() {
                let d = sq_dist(p, &c);
                if d < best_d[i] {
                    best_d[i] = d;
                }
            }
            centroids.push(c);
        }

        let dim = patch * patch * 3;
        let mut assign = vec![usize::MAX; points.len()];
        for _ in 0..50 {
            let mut moved = false;
            for (i, p) in points.iter().enumerate() {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (c, cent) in centroids.iter().enumerate() {
                    let d = sq_dist(p, cent);
                    if d < bd {
                        bd = d;
                        best = c;
                    }
                }
                if assign[i] != best {
                    assign[i] = best;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
            let mut sums = vec![vec![0.0f64; dim]; k];
            let mut counts = vec![0usize; k];
            for (i, p) in points.iter().enumerate() {
                counts[assign[i]] += 1;
                for (s, &v) in sums[assign[i]].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                        *dst = s / counts[c] as f64;
                    }
                }
            }
        }
        let data: Vec<f64> = centroids.into_iter().flatten().collect();
        Ok(Codebook { patch, centroids: Tensor::new(&[k, dim], data).expect("centroid shape") })
    }

    /// Raster-order nearest-centroid index per patch; ties prefer the lower
    /// centroid index.
    pub fn encode(&self, image: &[u8], side: usize) -> Result<Vec<usize>> {
        if side % self.patch != 0 || image.len() != side * side * 3 {
            return Err(contract("codebook_encode", "image extent does not match the codebook"));
        }
        let g = self.grid(side);
        let mut out = Vec::with_capacity(g * g);
        for pr in 0..g {
            for pc in 0..g {
                let p = patch_vector(image, side, self.patch, pr, pc);
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for c in 0..self.len() {
                    let d = sq_dist(&p, self.centroids.row(c));
                    if d < bd {
                        bd = d;
                        best = c;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Paints centroid patches back into an RGB byte image.
    pub fn decode(&self, indices: &[usize], side: usize) -> Result<Vec<u8>> {
        let g = self.grid(side);
        if indices.len() != g * g {
            return Err(contract(
                "codebook_decode",
                format!("{} indices cannot tile a {g}x{g} grid", indices.len()),
            ));
        }
        let mut image = vec![0u8; side * side * 3];
        for (pi, &idx) in indices.iter().enumerate() {
            if idx >= self.len() {
                return Err(contract("codebook_decode", format!("index {idx} outside codebook")));
            }
            let (pr, pc) = (pi / g, pi % g);
            let cent = self.centroids.row(idx);
            let mut k = 0;
            for r in 0..self.patch {
                for c in 0..self.patch {
                    let base = ((pr * self.patch + r) * side + pc * self.patch + c) * 3;
                    for ch in 0..3 {
                        image[base + ch] = (cent[k] * 255.0).round().clamp(0.0, 255.0) as u8;
                        k += 1;
                    }
                }
            }
        }
        Ok(image)
    }
}

/// Frozen random projection of a 4x4 average-pooled image onto the condition
/// space, L2-normalized (the zero image stays zero).
#[derive(Clone, Debug)]
pub struct ConditionEncoder<F: Scalar> {
    /// [d_c x pooled_dim]
    pub w: Tensor<F>,
    pub side: usize,
}

pub const POOL: usize = 4;

impl<F: Scalar> ConditionEncoder<F> {
    pub fn new(side: usize, d_c: usize, seed: u64) -> Result<Self> {
        if side % POOL != 0 {
            return Err(contract("condition_encoder", format!("side {side} not divisible by {POOL}")));
        }
        let g = side / POOL;
        let dim = g * g * 3;
        let mut rng = stream(seed, "condition-encoder");
        let std = 1.0 / (dim as f64).sqrt();
        Ok(ConditionEncoder { w: normal_tensor(&mut rng, &[d_c, dim], 0.0, std), side })
    }

    pub fn d_c(&self) -> usize {
        self.w.shape()[0]
    }

    /// Mean pixel value per 4x4 window and channel, scaled to [0,1].
    pub fn pool(&self, image: &[u8]) -> Result<Vec<f64>> {
        if image.len() != self.side * self.side * 3 {
            return Err(contract("condition_encoder", "image byte length mismatch"));
        }
        let g = self.side / POOL;
        let mut out = vec![0.0f64; g * g * 3];
        for gr in 0..g {
            for gc in 0..g {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for r in 0..POOL {
                        for c in 0..POOL {
                            acc += image[((gr * POOL + r) * self.side + gc * POOL + c) * 3 + ch]
                                as f64;
                        }
                    }
                    out[(gr * g + gc) * 3 + ch] = acc / (POOL * POOL) as f64 / 255.0;
                }
            }
        }
        Ok(out)
    }

    /// Unit-norm condition vector, [1 x d_c].
    pub fn encode(&self, image: &[u8]) -> Result<Tensor<F>> {
        let pooled = self.pool(image)?;
        let d_c = self.d_c();
        let mut out = vec![0.0f64; d_c];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self
                .w
                .row(r)
                .iter()
                .zip(&pooled)
                .map(|(&a, &b)| a.as_f64() * b)
                .sum();
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut out {
                *v /= norm;
            }
        }
        let data = out.into_iter().map(F::from_f64).collect();
        Ok(Tensor::new(&[1, d_c], data).expect("condition shape"))
    }
}

pub fn cosine<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.data().iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Largest pairwise cosine among a set of condition vectors.
pub fn pairwise_max_cosine<F: Scalar>(conds: &[Tensor<F>]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..conds.len() {
        for j in i + 1..conds.len() {
            best = best.max(cosine(&conds[i], &conds[j]));
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArConfig {
    /// Codebook size (the index vocabulary).
    pub k: usize,
    /// Indices per image.
    pub seq: usize,
    pub layers: usize,
    pub d_h: usize,
    pub heads: usize,
    pub d_c: usize,
}

impl GenArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.seq == 0 || self.layers == 0 {
            return Err(contract("genar_config", "k, seq and layers must be positive"));
        }
        if self.heads == 0 || self.d_h % self.heads != 0 {
            return Err(contract("genar_config", "heads must divide d_h"));
        }
        Ok(())
    }
}

/// Conditional autoregressive transformer over codebook indices. Position 0
/// holds the projected condition; position i+1 holds index i. Every position
/// predicts the next index, so the condition alone predicts index 0.
#[derive(Clone, Debug)]
pub struct GenArWeights<F: Scalar> {
    pub cfg: GenArConfig,
    /// [d_h x d_c]; trained with the rest, then frozen alongside it.
    pub cond_proj: Tensor<F>,
    /// [k x d_h]; doubles as the tied output head.
    pub tok_embed: Tensor<F>,
    /// [seq + 1 x d_h]
    pub pos_embed: Tensor<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm: Tensor<F>,
}

impl<F: Scalar> GenArWeights<F> {
    pub fn init(cfg: GenArConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, "genar/embed");
        let cond_proj = normal_tensor(&mut rng, &[cfg.d_h, cfg.d_c], 0.0, 0.02);
        let tok_embed = normal_tensor(&mut rng, &[cfg.k, cfg.d_h], 0.0, 0.02);
        let pos_embed = normal_tensor(&mut rng, &[cfg.seq + 1, cfg.d_h], 0.0, 0.02);
        let layers = (0..cfg.layers)
            .map(|k| LayerWeights::init(cfg.d_h, seed, &format!("genar/layer{k}")))
            .collect();
        let final_norm = Tensor::full(&[cfg.d_h], F::one());
        Ok(GenArWeights { cfg, cond_proj, tok_embed, pos_embed, layers, final_norm })
    }

    pub fn insert(&self, g: &mut Graph<F>, trainable: bool) -> GenArNodes {
        fn put<F: Scalar>(g: &mut Graph<F>, t: &Tensor<F>, trainable: bool) -> NodeId {
            if trainable {
                g.leaf(t.clone(), true)
            } else {
                g.constant(t.clone())
            }
        }
        GenArNodes {
            cond_proj: put(g, &self.cond_proj, trainable),
            tok_embed: put(g, &self.tok_embed, trainable),
            pos_embed: put(g, &self.pos_embed, trainable),
            layers: self.layers.iter().map(|l| l.insert(g, trainable)).collect(),
            final_norm: put(g, &self.final_norm, trainable),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("genar/cond_proj".to_string(), &self.cond_proj),
            ("genar/tok_embed".to_string(), &self.tok_embed),
            ("genar/pos_embed".to_string(), &self.pos_embed),
        ];
        for (k, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("genar/layer{k}")));
        }
        out.push(("genar/final_norm".to_string(), &self.final_norm));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("genar/cond_proj".to_string(), &mut self.cond_proj),
            ("genar/tok_embed".to_string(), &mut self.tok_embed),
            ("genar/pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (k, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut(&format!("genar/layer{k}")));
        }
        out.push(("genar/final_norm".to_string(), &mut self.final_norm));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub struct GenArNodes {
    pub cond_proj: NodeId,
    pub tok_embed: NodeId,
    pub pos_embed: NodeId,
    pub layers: Vec<LayerNodes>,
    pub final_norm: NodeId,
}

fn genar_slots(nodes: &GenArNodes) -> Vec<NodeId> {
    let mut out = vec![nodes.cond_proj, nodes.tok_embed, nodes.pos_embed];
    for l in &nodes.layers {
        out.extend_from_slice(&[l.norm1, l.wq, l.wk, l.wv, l.wo, l.norm2, l.w1, l.w2]);
    }
    out.push(nodes.final_norm);
    out
}

/// Causal forward over [condition][indices...]; logits are [len(indices)+1 x k].
pub fn genar_forward<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &GenArConfig,
    nodes: &GenArNodes,
    cond: &Tensor<F>,
    indices: &[usize],
) -> Result<NodeId> {
    if cond.shape() != [1, cfg.d_c] {
        return Err(contract("genar_forward", format!("condition shape {:?}", cond.shape())));
    }
    if indices.len() > cfg.seq {
        return Err(contract(
            "genar_forward",
            format!("{} indices exceed sequence budget {}", indices.len(), cfg.seq),
        ));
    }
    for &i in indices {
        if i >= cfg.k {
            return Err(contract("genar_forward", format!("index {i} outside codebook {}", cfg.k)));
        }
    }
    let cond_node = g.constant(cond.clone());
    let cond_emb = g.matmul_nt(cond_node, nodes.cond_proj)?;
    let mut h = if indices.is_empty() {
        cond_emb
    } else {
        let idx_emb = g.gather_rows(nodes.tok_embed, indices)?;
        g.concat_rows(cond_emb, idx_emb)?
    };
    let l = indices.len() + 1;
    let pos_ids: Vec<usize> = (0..l).collect();
    let pos = g.gather_rows(nodes.pos_embed, &pos_ids)?;
    h = g.add(h, pos)?;
    for ln in &nodes.layers {
        let (next, _) = layer_forward(g, ln, h, cfg.heads, None)?;
        h = next;
    }
    let hn = g.rms_norm(h, nodes.final_norm)?;
    g.matmul_nt(hn, nodes.tok_embed).map_err(Into::into)
}

pub struct ArPretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Teacher-forced pretraining on (condition, indices) pairs. Every tensor,
/// including the condition projection, trains here; the tuning stage later
/// freezes them all.
pub fn pretrain_ar<F: Scalar>(
    weights: &mut GenArWeights<F>,
    pairs: &[(Tensor<F>, Vec<usize>)],
    steps: u64,
    batch: usize,
    base_lr: f64,
    seed: u64,
) -> Result<ArPretrainReport> {
    if pairs.is_empty() {
        return Err(contract("pretrain_ar", "no training pairs"));
    }
    let cfg = weights.cfg.clone();
    for (_, idx) in pairs {
        if idx.len() != cfg.seq {
            return Err(contract("pretrain_ar", "index sequence length mismatch"));
        }
    }
    let n_slots = weights.named().len();
    let mut opt = Adam::new(n_slots);
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let mut order = stream(seed, &format!("genar-pretrain/batch/{step}"));
        let picks: Vec<usize> =
            (0..batch).map(|_| rand::Rng::gen_range(&mut order, 0..pairs.len())).collect();
        let mut acc: Vec<Option<Tensor<F>>> = vec![None; n_slots];
        let mut batch_loss = 0.0;
        for &pick in &picks {
            let (cond, indices) = &pairs[pick];
            let mut g = Graph::new();
            let nodes = weights.insert(&mut g, true);
            let logits = genar_forward(&mut g, &cfg, &nodes, cond, indices)?;
            // Position i predicts index i; the final position has no target.
            let mut targets = vec![0usize; cfg.seq + 1];
            let mut mask = vec![false; cfg.seq + 1];
            for (i, &idx) in indices.iter().enumerate() {
                targets[i] = idx;
                mask[i] = true;
            }
            let loss = g.cross_entropy_next_token(logits, &targets, &mask)?;
            let scaled = g.scale(loss, F::from_f64(1.0 / batch as f64));
            batch_loss += g.value(scaled).data()[0].as_f64();
            let grads = g.backward(scaled)?;
            crate::backbone::accumulate(&mut acc, &genar_slots(&nodes), &grads);
        }
        if !batch_loss.is_finite() {
            return Err(ModelError::Diverged(format!("genar step {step}: loss {batch_loss}")));
        }
        losses.push(batch_loss);
        let lr = cosine_lr(base_lr, step, steps);
        let mut named = weights.named_mut();
        let mut params: Vec<&mut Tensor<F>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        opt.step(&mut params, &acc, lr);
    }
    Ok(ArPretrainReport {
        initial_loss: losses[0],
        final_loss: *losses.last().expect("at least one step"),
        losses: losses.clone(),
    })
}

/// Greedy full-length index generation from a condition vector.
pub fn generate_indices<F: Scalar>(weights: &GenArWeights<F>, cond: &Tensor<F>) -> Result<Vec<usize>> {
    let cfg = &weights.cfg;
    let mut indices: Vec<usize> = Vec::with_capacity(cfg.seq);
    for _ in 0..cfg.seq {
        let mut g = Graph::new();
        let nodes = weights.insert(&mut g, false);
        let logits = genar_forward(&mut g, cfg, &nodes, cond, &indices)?;
        let t = g.value(logits);
        indices.push(argmax(t.row(t.shape()[0] - 1)));
    }
    Ok(indices)
}

/// Condition to RGB bytes through the index generator and the codebook.
pub fn generate_image<F: Scalar>(
    weights: &GenArWeights<F>,
    codebook: &Codebook,
    cond: &Tensor<F>,
    side: usize,
) -> Result<Vec<u8>> {
    let indices = generate_indices(weights, cond)?;
    codebook.decode(&indices, side)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-color synthetic images: left half a, right half b.
    fn two_tone(a: u8, b: u8) -> Vec<u8> {
        let side = 16;
        let mut img = vec![0u8; side * side * 3];
        for r in 0..side {
            for c in 0..side {
                let v = if c < side / 2 { a } else { b };
                let base = (r * side + c) * 3;
                img[base] = v;
                img[base + 1] = v / 2;
                img[base + 2] = 255 - v;
            }
        }
        img
    }

    #[test]
    fn codebook_clusters_separable_patches() {
        let imgs = [two_tone(255, 0), two_tone(200, 40)];
        let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
        let cb = Codebook::fit(&refs, 16, 8, 4, 9).unwrap();
        assert_eq!(cb.len(), 4);
        assert_eq!(cb.grid(16), 2);
        // Re-fit reproduces the same centroids.
        let cb2 = Codebook::fit(&refs, 16, 8, 4, 9).unwrap();
        assert_eq!(cb.centroids, cb2.centroids);
        let cb3 = Codebook::fit(&refs, 16, 8, 4, 10).unwrap();
        assert_eq!(cb3.len(), 4);
    }

    #[test]
    fn too_few_distinct_patches_is_an_error() {
        let img = two_tone(255, 255); // one distinct patch
        let refs: Vec<&[u8]> = vec![img.as_slice()];
        let err = Codebook::fit(&refs, 16, 8, 3, 9).unwrap_err();
        assert!(err.to_string().contains("distinct"), "{err}");
    }

    #[test]
    fn encode_matches_exhaustive_nearest_neighbor() {
        let imgs = [two_tone(255, 0), two_tone(200, 40), two_tone(10, 90)];
        let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
        let cb = Codebook::fit(&refs, 16, 8, 5, 9).unwrap();
        for img in &refs {
            let got = cb.encode(img, 16).unwrap();
            // Oracle: scan every centroid per patch, keeping the first
            // minimum encountered in index order.
            let mut want = Vec::new();
            for pr in 0..2 {
                for pc in 0..2 {
                    let p = patch_vector(img, 16, 8, pr, pc);
                    let mut best = 0usize;
                    for c in 1..cb.len() {
                        if sq_dist(&p, cb.centroids.row(c)) < sq_dist(&p, cb.centroids.row(best)) {
                            best = c;
                        }
                    }
                    want.push(best);
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn decode_round_trips_exact_centroids() {
        let imgs = [two_tone(255, 0), two_tone(128, 30)];
        let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
        let cb = Codebook::fit(&refs, 16, 8, 4, 9).unwrap();
        let idx = cb.encode(&imgs[0], 16).unwrap();
        let dec = cb.decode(&idx, 16).unwrap();
        assert_eq!(dec.len(), 16 * 16 * 3);
        let again = cb.encode(&dec, 16).unwrap();
        assert_eq!(idx, again);
        assert!(cb.decode(&[0; 3], 16).is_err());
        assert!(cb.decode(&[99; 4], 16).is_err());
    }

    #[test]
    fn condition_encoder_normalizes_and_separates() {
        let enc = ConditionEncoder::<f64>::new(16, 8, 4).unwrap();
        let a = enc.encode(&two_tone(255, 0)).unwrap();
        let b = enc.encode(&two_tone(0, 255)).unwrap();
        let norm: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(cosine(&a, &b) < 0.999);
        // The zero image maps to the zero vector, not NaN.
        let z = enc.encode(&vec![0u8; 16 * 16 * 3]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        // Determinism across constructions.
        let enc2 = ConditionEncoder::<f64>::new(16, 8, 4).unwrap();
        assert_eq!(enc.w, enc2.w);
    }

    #[test]
    fn pooling_averages_windows() {
        let enc = ConditionEncoder::<f64>::new(8, 4, 1).unwrap();
        let mut img = vec![0u8; 8 * 8 * 3];
        // One 4x4 window fully red.
        for r in 0..4 {
            for c in 0..4 {
                img[(r * 8 + c) * 3] = 255;
            }
        }
        let pooled = enc.pool(&img).unwrap();
        assert_eq!(pooled.len(), 2 * 2 * 3);
        assert!((pooled[0] - 1.0).abs() < 1e-12);
        assert_eq!(pooled[1], 0.0);
        assert_eq!(pooled[3], 0.0);
    }

    fn tiny_ar() -> GenArConfig {
        GenArConfig { k: 6, seq: 4, layers: 1, d_h: 16, heads: 2, d_c: 8 }
    }

    #[test]
    fn genar_forward_shapes_and_bounds() {
        let w = GenArWeights::<f64>::init(tiny_ar(), 3).unwrap();
        let cond = Tensor::full(&[1, 8], 0.3);
        let mut g = Graph::new();
        let nodes = w.insert(&mut g, false);
        let logits = genar_forward(&mut g, &w.cfg, &nodes, &cond, &[1, 2]).unwrap();
        assert_eq!(g.shape(logits), &[3, 6]);
        let mut g2 = Graph::new();
        let nodes2 = w.insert(&mut g2, false);
        assert!(genar_forward(&mut g2, &w.cfg, &nodes2, &cond, &[9]).is_err());
        let mut g3 = Graph::new();
        let nodes3 = w.insert(&mut g3, false);
        assert!(genar_forward(&mut g3, &w.cfg, &nodes3, &cond, &[0; 5]).is_err());
    }

    #[test]
    fn genar_memorizes_a_handful_of_pairs() {
        let mut w = GenArWeights::<f64>::init(tiny_ar(), 3).unwrap();
        let pairs: Vec<(Tensor<f64>, Vec<usize>)> = (0..3)
            .map(|i| {
                let mut c = vec![0.0; 8];
                c[i] = 1.0;
                (Tensor::new(&[1, 8], c).unwrap(), vec![i, i + 1, i + 2, i + 3])
            })
            .collect();
        let report = pretrain_ar(&mut w, &pairs, 150, 3, 3e-3, 5).unwrap();
        assert!(
            report.final_loss < 0.5 * report.initial_loss,
            "loss {} -> {}",
            report.initial_loss,
            report.final_loss
        );
        for (cond, want) in &pairs {
            assert_eq!(&generate_indices(&w, cond).unwrap(), want);
        }
    }
}
