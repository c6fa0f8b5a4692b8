//! Sparse task network: low-dimensional per-layer task states with an EMA
//! chain across layers, hard sparse activation keeping exactly k_act neurons
//! per token, and a zero-initialized back-projection that infuses deltas into
//! the attention projections.

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use nt_core::rng::{normal_f64, normal_tensor, stream};
use nt_core::{Graph, NodeId, Scalar, Tensor};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Keep the k_act largest values (ties prefer the lower index).
    Gaussian,
    /// Keep a uniform random k_act of the 2*k_act largest values.
    Top2Beta,
    /// Rank values into 10 near-equal buckets and draw evenly from each.
    Level,
    /// Keep the k_act values closest to the center m.
    Distribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Q,
    K,
    V,
}

/// Which attention projections receive infusion deltas. The back-projection
/// output is laid out in the listed order, one D_h block per site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfusionSites {
    Qv,
    Kv,
    Qkv,
}

impl InfusionSites {
    pub fn order(self) -> &'static [Site] {
        match self {
            InfusionSites::Qv => &[Site::Q, Site::V],
            InfusionSites::Kv => &[Site::K, Site::V],
            InfusionSites::Qkv => &[Site::Q, Site::K, Site::V],
        }
    }

    pub fn count(self) -> usize {
        self.order().len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseTaskConfig {
    /// Task state width D_z.
    pub d_z: usize,
    /// EMA carry weight across layers.
    pub alpha: f64,
    /// Mean activation ratio.
    pub beta: f64,
    /// Reserved subset fraction; must stay below beta.
    pub f: f64,
    /// Center of the distribution pattern.
    pub m: f64,
    pub pattern: Pattern,
    pub sites: InfusionSites,
}

impl Default for SparseTaskConfig {
    fn default() -> Self {
        SparseTaskConfig {
            d_z: 128,
            alpha: 0.9,
            beta: 0.4,
            f: 0.1,
            m: 0.0,
            pattern: Pattern::Gaussian,
            sites: InfusionSites::Qv,
        }
    }
}

impl SparseTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 {
            return Err(contract("sparse_config", "d_z must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(contract("sparse_config", format!("alpha {} outside [0,1]", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(contract("sparse_config", format!("beta {} outside (0,1]", self.beta)));
        }
        if !(0.0..1.0).contains(&self.f) || self.f >= self.beta {
            return Err(contract(
                "sparse_config",
                format!("f {} must satisfy 0 <= f < beta = {}", self.f, self.beta),
            ));
        }
        Ok(())
    }
}

/// Draws the per-pass activation ratio r ~ N(beta, (0.1 beta)^2), clamped so
/// at least one and at most all neurons stay active.
pub fn sample_ratio<R: Rng>(rng: &mut R, beta: f64, d_z: usize) -> f64 {
    normal_f64(rng, beta, 0.1 * beta).clamp(1.0 / d_z as f64, 1.0)
}

pub fn k_active(r: f64, d_z: usize) -> usize {
    (r * d_z as f64).round().max(1.0) as usize
}

/// Indices ordered by descending value, ties preferring the lower index.
fn order_desc<F: Scalar>(row: &[F]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    idx
}

fn gaussian_row<F: Scalar>(row: &[F], k: usize, keep: &mut [bool]) {
    for &i in order_desc(row).iter().take(k) {
        keep[i] = true;
    }
}

fn top2beta_row<F: Scalar, R: Rng>(row: &[F], k: usize, rng: &mut R, keep: &mut [bool]) {
    let pool_n = (2 * k).min(row.len());
    let order = order_desc(row);
    let pool = &order[..pool_n];
    if k == pool_n {
        for &i in pool {
            keep[i] = true;
        }
    } else {
        for j in rand::seq::index::sample(rng, pool_n, k) {
            keep[pool[j]] = true;
        }
    }
}

/// Ten rank buckets of near-equal size (top buckets absorb the remainder).
/// Each bucket contributes k/10 random members; the k%10 extras go to the top
/// bucket, and any demand a bucket cannot meet spills to the next one down.
fn level_row<F: Scalar, R: Rng>(row: &[F], k: usize, rng: &mut R, keep: &mut [bool]) {
    let d = row.len();
    let order = order_desc(row);
    let quota = k / 10;
    let mut carry = k - 10 * quota;
    let mut start = 0;
    for b in 0..10 {
        let size = d / 10 + usize::from(b < d % 10);
        let want = quota + carry;
        let take = want.min(size);
        carry = want - take;
        let bucket = &order[start..start + size];
        if take == size {
            for &i in bucket {
                keep[i] = true;
            }
        } else if take > 0 {
            for j in rand::seq::index::sample(rng, size, take) {
                keep[bucket[j]] = true;
            }
        }
        start += size;
    }
    debug_assert_eq!(carry, 0, "bucket capacities sum to d >= k");
}

fn distribution_row<F: Scalar>(row: &[F], k: usize, m: f64, keep: &mut [bool]) {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let dist = |i: usize| (row[i].as_f64() - m).abs();
    idx.sort_by(|&a, &b| {
        dist(a).partial_cmp(&dist(b)).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    for &i in idx.iter().take(k) {
        keep[i] = true;
    }
}

/// Builds the 0/1 retention mask for a [tokens x D_z] state, exactly k_act
/// ones per row. Retained entries pass through bit-identically because the
/// mask multiplies by exactly 1.
pub fn activation_mask<F: Scalar, R: Rng>(
    z: &Tensor<F>,
    k_act: usize,
    pattern: Pattern,
    m: f64,
    rng: &mut R,
) -> Result<Tensor<F>> {
    let (l, d) = z.dims2()?;
    if k_act == 0 || k_act > d {
        return Err(contract("activation_mask", format!("k_act {k_act} outside 1..={d}")));
    }
    let mut keep = vec![false; l * d];
    for i in 0..l {
        let row = z.row(i);
        let out = &mut keep[i * d..(i + 1) * d];
        match pattern {
            Pattern::Gaussian => gaussian_row(row, k_act, out),
            Pattern::Top2Beta => top2beta_row(row, k_act, rng, out),
            Pattern::Level => level_row(row, k_act, rng, out),
            Pattern::Distribution => distribution_row(row, k_act, m, out),
        }
    }
    let data = keep.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
    Ok(Tensor::new(&[l, d], data).expect("mask shape"))
}

/// Splits a back-projection output [L x count*D_h] into per-site deltas in
/// the layout order of `sites`.
pub fn split_infusion<F: Scalar>(
    z_b: &Tensor<F>,
    d_h: usize,
    sites: InfusionSites,
) -> Result<Vec<(Site, Tensor<F>)>> {
    let (l, w) = z_b.dims2()?;
    if w != sites.count() * d_h {
        return Err(contract(
            "split_infusion",
            format!("width {w} != {} sites x d_h {d_h}", sites.count()),
        ));
    }
    let mut out = Vec::with_capacity(sites.count());
    for (s, &site) in sites.order().iter().enumerate() {
        let mut data = Vec::with_capacity(l * d_h);
        for i in 0..l {
            data.extend_from_slice(&z_b.data()[i * w + s * d_h..i * w + (s + 1) * d_h]);
        }
        out.push((site, Tensor::new(&[l, d_h], data).expect("split shape")));
    }
    Ok(out)
}

/// Trainable adapter parameters: per layer, a down-projection W_z (small
/// normal init) and a back-projection W_b (zero init so the tuned model
/// starts exactly at the frozen backbone).
#[derive(Clone, Debug)]
pub struct AdapterWeights<F: Scalar> {
    /// Per layer [D_z x D_h].
    pub w_z: Vec<Tensor<F>>,
    /// Per layer [count*D_h x D_z].
    pub w_b: Vec<Tensor<F>>,
}

impl<F: Scalar> AdapterWeights<F> {
    pub fn init(cfg: &SparseTaskConfig, layers: usize, d_h: usize, seed: u64) -> Self {
        let mut w_z = Vec::with_capacity(layers);
        let mut w_b = Vec::with_capacity(layers);
        for k in 0..layers {
            let mut rng = stream(seed, &format!("adapter/w_z/{k}"));
            w_z.push(normal_tensor(&mut rng, &[cfg.d_z, d_h], 0.0, 0.02));
            w_b.push(Tensor::zeros(&[cfg.sites.count() * d_h, cfg.d_z]));
        }
        AdapterWeights { w_z, w_b }
    }

    pub fn param_count(&self) -> usize {
        self.w_z.iter().chain(self.w_b.iter()).map(|t| t.numel()).sum()
    }
}

/// One forward pass worth of adapter state: the ratio (sampled once per pass
/// in training, pinned to beta at eval), the subset-sampling stream, the EMA
/// chain, and the retained-neuron record for activation statistics.
pub struct AdapterPass {
    pub r: f64,
    pub k_act: usize,
    rng: ChaCha8Rng,
    prev_u: Option<NodeId>,
    /// Per layer: whether each neuron was retained at any token position.
    pub retained: Vec<Vec<bool>>,
}

impl AdapterPass {
    pub fn with_ratio(cfg: &SparseTaskConfig, r: f64, rng: ChaCha8Rng) -> Self {
        AdapterPass { r, k_act: k_active(r, cfg.d_z), rng, prev_u: None, retained: Vec::new() }
    }

    /// Training pass: one ratio draw, shared by every layer of this pass.
    pub fn train(cfg: &SparseTaskConfig, seed: u64, pass: u64) -> Self {
        let mut ratio_rng = stream(seed, &format!("adapter/ratio/{pass}"));
        let r = sample_ratio(&mut ratio_rng, cfg.beta, cfg.d_z);
        Self::with_ratio(cfg, r, stream(seed, &format!("adapter/mask/{pass}")))
    }

    /// Eval pass: ratio pinned to beta; the mask stream is keyed by a stable
    /// sample tag so repeated evaluation is deterministic.
    pub fn eval(cfg: &SparseTaskConfig, seed: u64, tag: &str) -> Self {
        Self::with_ratio(cfg, cfg.beta, stream(seed, &format!("adapter/eval-mask/{tag}")))
    }

    /// Applies one adapter layer to the normalized pre-attention hidden and
    /// returns the per-site deltas, each [L x D_h], in `sites.order()`.
    ///
    /// The retention mask is computed from the EMA state's values and applied
    /// multiplicatively, so retained entries (and their gradients) pass
    /// through unchanged while dropped ones contribute nothing.
    pub fn apply_layer<F: Scalar>(
        &mut self,
        g: &mut Graph<F>,
        cfg: &SparseTaskConfig,
        w_z: NodeId,
        w_b: NodeId,
        h_norm: NodeId,
    ) -> Result<Vec<NodeId>> {
        let z = g.matmul_nt(h_norm, w_z)?;
        let z_u = match self.prev_u {
            None => z,
            Some(prev) => {
                let carried = g.scale(prev, F::from_f64(cfg.alpha));
                let fresh = g.scale(z, F::from_f64(1.0 - cfg.alpha));
                g.add(carried, fresh)?
            }
        };
        self.prev_u = Some(z_u);
        let mask = activation_mask(g.value(z_u), self.k_act, cfg.pattern, cfg.m, &mut self.rng)?;
        let (l, d) = mask.dims2()?;
        let mut union = vec![false; d];
        for i in 0..l {
            for (j, u) in union.iter_mut().enumerate() {
                *u |= mask.get2(i, j) != F::zero();
            }
        }
        self.retained.push(union);
        let active = g.mul_mask(z_u, &mask)?;
        let z_b = g.matmul_nt(active, w_b)?;
        let d_h = g.shape(z_b)[1] / cfg.sites.count();
        (0..cfg.sites.count())
            .map(|s| g.slice_cols(z_b, s * d_h, d_h).map_err(Into::into))
            .collect()
    }
}

/// Retention frequency per (task, layer, neuron), accumulated over eval
/// passes. A neuron counts once per pass if it was retained at any token
/// position in that layer.
#[derive(Clone, Debug)]
pub struct ActivationStats {
    pub tasks: Vec<String>,
    pub layers: usize,
    pub d_z: usize,
    counts: Vec<u64>,
    passes: Vec<u64>,
}

impl ActivationStats {
    pub fn new(tasks: &[&str], layers: usize, d_z: usize) -> Self {
        ActivationStats {
            tasks: tasks.iter().map(|t| t.to_string()).collect(),
            layers,
            d_z,
            counts: vec![0; tasks.len() * layers * d_z],
            passes: vec![0; tasks.len()],
        }
    }

    pub fn record(&mut self, task: usize, retained: &[Vec<bool>]) -> Result<()> {
        if task >= self.tasks.len() || retained.len() != self.layers {
            return Err(contract(
                "activation_stats",
                format!("task {task} / {} layers does not fit the table", retained.len()),
            ));
        }
        for (layer, union) in retained.iter().enumerate() {
            if union.len() != self.d_z {
                return Err(contract("activation_stats", "neuron vector width mismatch"));
            }
            let base = (task * self.layers + layer) * self.d_z;
            for (n, &hit) in union.iter().enumerate() {
                self.counts[base + n] += u64::from(hit);
            }
        }
        self.passes[task] += 1;
        Ok(())
    }

    pub fn passes(&self, task: usize) -> u64 {
        self.passes[task]
    }

    pub fn frequency(&self, task: usize, layer: usize, neuron: usize) -> f64 {
        let p = self.passes[task];
        if p == 0 {
            return 0.0;
        }
        self.counts[(task * self.layers + layer) * self.d_z + neuron] as f64 / p as f64
    }

    /// Mean retention frequency of each neuron across layers.
    pub fn layer_mean(&self, task: usize) -> Vec<f64> {
        (0..self.d_z)
            .map(|n| {
                (0..self.layers).map(|l| self.frequency(task, l, n)).sum::<f64>()
                    / self.layers as f64
            })
            .collect()
    }

    /// The task's signature: the top_n neurons by layer-mean frequency,
    /// ties preferring the lower index. Returned sorted ascending.
    pub fn signature(&self, task: usize, top_n: usize) -> Vec<usize> {
        let freq = self.layer_mean(task);
        let mut idx: Vec<usize> = (0..self.d_z).collect();
        idx.sort_by(|&a, &b| {
            freq[b].partial_cmp(&freq[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        idx.truncate(top_n.min(self.d_z));
        idx.sort_unstable();
        idx
    }

    /// Pairwise Jaccard similarity of task signatures.
    pub fn jaccard_matrix(&self, top_n: usize) -> Vec<Vec<f64>> {
        let sigs: Vec<Vec<usize>> = (0..self.tasks.len()).map(|t| self.signature(t, top_n)).collect();
        sigs.iter().map(|a| sigs.iter().map(|b| jaccard(a, b)).collect()).collect()
    }

    /// Rows of `task,layer,neuron,frequency`.
    pub fn csv(&self) -> String {
        let mut s = String::from("task,layer,neuron,frequency\n");
        for (t, name) in self.tasks.iter().enumerate() {
            for l in 0..self.layers {
                for n in 0..self.d_z {
                    s.push_str(&format!("{name},{l},{n},{:.6}\n", self.frequency(t, l, n)));
                }
            }
        }
        s
    }
}

/// Jaccard similarity of two ascending index sets; two empty sets count as
/// identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(pattern: Pattern) -> SparseTaskConfig {
        SparseTaskConfig { d_z: 32, pattern, ..SparseTaskConfig::default() }
    }

    #[test]
    fn config_bounds_are_enforced() {
        assert!(cfg(Pattern::Gaussian).validate().is_ok());
        assert!(SparseTaskConfig { d_z: 0, ..Default::default() }.validate().is_err());
        assert!(SparseTaskConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(SparseTaskConfig { beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(SparseTaskConfig { f: 0.4, ..Default::default() }.validate().is_err());
        assert!(SparseTaskConfig { f: 0.5, beta: 0.4, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn every_pattern_keeps_exactly_k_per_row() {
        let patterns =
            [Pattern::Gaussian, Pattern::Top2Beta, Pattern::Level, Pattern::Distribution];
        for seed in 0..100u64 {
            let mut rng = stream(seed, "mask-test");
            let z: Tensor<f64> = normal_tensor(&mut rng, &[5, 32], 0.0, 1.0);
            for &p in &patterns {
                for k in [1usize, 7, 13, 32] {
                    let mask = activation_mask(&z, k, p, 0.0, &mut rng).unwrap();
                    for i in 0..5 {
                        let ones =
                            mask.row(i).iter().filter(|&&v| v != 0.0).count();
                        assert_eq!(ones, k, "pattern {p:?} k {k} seed {seed}");
                        assert!(mask.row(i).iter().all(|&v| v == 0.0 || v == 1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn retained_values_are_bit_identical() {
        let mut rng = stream(9, "bits");
        let z: Tensor<f64> = normal_tensor(&mut rng, &[3, 32], 0.0, 1.0);
        for &p in &[Pattern::Gaussian, Pattern::Top2Beta, Pattern::Level, Pattern::Distribution] {
            let mask = activation_mask(&z, 13, p, 0.0, &mut rng).unwrap();
            for (i, (&zv, &mv)) in z.data().iter().zip(mask.data()).enumerate() {
                let kept = zv * mv;
                if mv != 0.0 {
                    assert_eq!(kept.to_bits(), zv.to_bits(), "position {i}");
                } else {
                    assert_eq!(kept, 0.0);
                }
            }
        }
    }

    #[test]
    fn gaussian_keeps_the_largest() {
        let z = Tensor::new(&[1, 4], vec![0.5, -0.2, 0.9, 0.1]).unwrap();
        let mut rng = stream(0, "g");
        let mask = activation_mask(&z, 2, Pattern::Gaussian, 0.0, &mut rng).unwrap();
        let kept: Vec<f64> = z.data().iter().zip(mask.data()).map(|(&a, &b)| a * b).collect();
        assert_eq!(kept, vec![0.5, 0.0, 0.9, 0.0]);
    }

    #[test]
    fn distribution_keeps_the_nearest_to_center() {
        let z = Tensor::new(&[1, 4], vec![0.5, -0.1, 0.9, 0.2]).unwrap();
        let mut rng = stream(0, "d");
        let mask = activation_mask(&z, 2, Pattern::Distribution, 0.0, &mut rng).unwrap();
        let kept: Vec<f64> = z.data().iter().zip(mask.data()).map(|(&a, &b)| a * b).collect();
        assert_eq!(kept, vec![0.0, -0.1, 0.0, 0.2]);
    }

    #[test]
    fn top2beta_draws_from_the_top_pool() {
        let mut z_data = vec![0.0f64; 32];
        for (i, v) in z_data.iter_mut().enumerate() {
            *v = if i < 8 { 10.0 + i as f64 } else { -(i as f64) };
        }
        let z = Tensor::new(&[1, 32], z_data).unwrap();
        // k = 4 -> pool is the 8 largest, which sit at indices 0..8.
        for seed in 0..20 {
            let mut rng = stream(seed, "t2b");
            let mask = activation_mask(&z, 4, Pattern::Top2Beta, 0.0, &mut rng).unwrap();
            for (i, &mv) in mask.data().iter().enumerate() {
                if mv != 0.0 {
                    assert!(i < 8, "seed {seed} kept index {i} outside the pool");
                }
            }
        }
    }

    #[test]
    fn level_spills_overflow_downward() {
        // 10 values, one per bucket. k = 5 puts the whole quota on the top
        // bucket, whose capacity is 1, so the demand cascades and the five
        // largest survive.
        let z = Tensor::new(&[1, 10], (0..10).map(|i| i as f64).collect()).unwrap();
        let mut rng = stream(3, "level");
        let mask = activation_mask(&z, 5, Pattern::Level, 0.0, &mut rng).unwrap();
        let kept: Vec<usize> =
            mask.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(kept, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn level_spreads_across_buckets() {
        let mut rng = stream(11, "level-spread");
        let z: Tensor<f64> = normal_tensor(&mut rng, &[1, 32], 0.0, 1.0);
        // k = 30 forces at least one pick in every bucket (quota 3 each).
        let mask = activation_mask(&z, 30, Pattern::Level, 0.0, &mut rng).unwrap();
        let order = order_desc(z.row(0));
        let mut start = 0;
        for b in 0..10 {
            let size = 32 / 10 + usize::from(b < 32 % 10);
            let hits = order[start..start + size]
                .iter()
                .filter(|&&i| mask.data()[i] != 0.0)
                .count();
            assert!(hits >= 2, "bucket {b} kept {hits}");
            start += size;
        }
    }

    #[test]
    fn full_ratio_keeps_everything_for_every_pattern() {
        let mut rng = stream(4, "full");
        let z: Tensor<f64> = normal_tensor(&mut rng, &[4, 32], 0.0, 1.0);
        for &p in &[Pattern::Gaussian, Pattern::Top2Beta, Pattern::Level, Pattern::Distribution] {
            let mask = activation_mask(&z, 32, p, 0.0, &mut rng).unwrap();
            assert!(mask.data().iter().all(|&v| v == 1.0), "pattern {p:?}");
        }
    }

    #[test]
    fn ratio_draws_match_the_declared_moments() {
        let mut rng = stream(12, "ratio-stats");
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_ratio(&mut rng, 0.4, 32)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!((mean - 0.4).abs() < 0.002, "mean {mean}");
        assert!((var.sqrt() - 0.04).abs() < 0.004, "std {}", var.sqrt());
    }

    #[test]
    fn ratio_is_clamped_to_the_valid_range() {
        let mut rng = stream(13, "ratio-clamp");
        for _ in 0..1000 {
            let low = sample_ratio(&mut rng, 0.04, 32);
            assert!(low >= 1.0 / 32.0 && low <= 1.0);
            let high = sample_ratio(&mut rng, 1.0, 32);
            assert!(high <= 1.0);
        }
        assert_eq!(k_active(1.0 / 32.0, 32), 1);
        assert_eq!(k_active(1.0, 32), 32);
        assert_eq!(k_active(0.4, 32), 13);
    }

    fn run_chain(alpha: f64, layers: usize) -> Vec<Tensor<f64>> {
        let cfg = SparseTaskConfig { d_z: 8, alpha, beta: 1.0, f: 0.5, ..Default::default() };
        let weights = AdapterWeights::<f64>::init(&cfg, layers, 6, 77);
        let mut g = Graph::new();
        let mut pass = AdapterPass::with_ratio(&cfg, 1.0, stream(0, "chain"));
        let mut rng = stream(21, "chain-h");
        let mut states = Vec::new();
        for k in 0..layers {
            let h = g.constant(normal_tensor(&mut rng, &[3, 6], 0.0, 1.0));
            let wz = g.leaf(weights.w_z[k].clone(), true);
            let wb = g.leaf(weights.w_b[k].clone(), true);
            pass.apply_layer(&mut g, &cfg, wz, wb, h).unwrap();
            states.push(g.value(pass.prev_u.unwrap()).clone());
        }
        states
    }

    #[test]
    fn ema_endpoints_behave() {
        // alpha = 1: every layer's carried state equals the first layer's.
        let pinned = run_chain(1.0, 3);
        assert_eq!(pinned[1].max_abs_diff(&pinned[0]), 0.0);
        assert_eq!(pinned[2].max_abs_diff(&pinned[0]), 0.0);
        // alpha = 0: the chain is memoryless, matching fresh projections.
        let fresh = run_chain(0.0, 3);
        let cfg = SparseTaskConfig { d_z: 8, alpha: 0.0, beta: 1.0, f: 0.5, ..Default::default() };
        let weights = AdapterWeights::<f64>::init(&cfg, 3, 6, 77);
        let mut rng = stream(21, "chain-h");
        for k in 0..3 {
            let mut g = Graph::new();
            let h = g.constant(normal_tensor(&mut rng, &[3, 6], 0.0, 1.0));
            let wz = g.constant(weights.w_z[k].clone());
            let z = g.matmul_nt(h, wz).unwrap();
            assert!(fresh[k].max_abs_diff(g.value(z)) < 1e-12, "layer {k}");
        }
    }

    #[test]
    fn ema_interpolates_between_layers() {
        let states = run_chain(0.9, 2);
        // Layer 2 state = 0.9 * layer 1 + 0.1 * fresh; its distance from the
        // layer 1 state must be strictly smaller than the fresh state's.
        let cfg = SparseTaskConfig { d_z: 8, alpha: 0.9, beta: 1.0, f: 0.5, ..Default::default() };
        let weights = AdapterWeights::<f64>::init(&cfg, 2, 6, 77);
        let mut rng = stream(21, "chain-h");
        let _ = normal_tensor::<f64, _>(&mut rng, &[3, 6], 0.0, 1.0);
        let h2 = normal_tensor::<f64, _>(&mut rng, &[3, 6], 0.0, 1.0);
        let mut g = Graph::new();
        let h = g.constant(h2);
        let wz = g.constant(weights.w_z[1].clone());
        let z2_id = g.matmul_nt(h, wz).unwrap();
        let z2 = g.value(z2_id).clone();
        let d_carry = states[1].max_abs_diff(&states[0]);
        let d_fresh = z2.max_abs_diff(&states[0]);
        assert!(d_carry < 0.2 * d_fresh, "carry {d_carry} fresh {d_fresh}");
    }

    #[test]
    fn zero_back_projection_yields_zero_deltas() {
        let cfg = cfg(Pattern::Gaussian);
        let weights = AdapterWeights::<f64>::init(&cfg, 2, 16, 5);
        let mut g = Graph::new();
        let mut pass = AdapterPass::train(&cfg, 42, 0);
        let mut rng = stream(1, "h");
        for k in 0..2 {
            let h = g.constant(normal_tensor(&mut rng, &[6, 16], 0.0, 1.0));
            let wz = g.leaf(weights.w_z[k].clone(), true);
            let wb = g.leaf(weights.w_b[k].clone(), true);
            let deltas = pass.apply_layer(&mut g, &cfg, wz, wb, h).unwrap();
            assert_eq!(deltas.len(), 2);
            for d in deltas {
                assert_eq!(g.shape(d), &[6, 16]);
                assert!(g.value(d).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn split_infusion_layouts() {
        let mut rng = stream(2, "split");
        let z: Tensor<f64> = normal_tensor(&mut rng, &[3, 12], 0.0, 1.0);
        let qv = split_infusion(&z, 6, InfusionSites::Qv).unwrap();
        assert_eq!(qv[0].0, Site::Q);
        assert_eq!(qv[1].0, Site::V);
        assert_eq!(qv[0].1.get2(1, 2), z.get2(1, 2));
        assert_eq!(qv[1].1.get2(1, 2), z.get2(1, 8));
        let kv = split_infusion(&z, 6, InfusionSites::Kv).unwrap();
        assert_eq!(kv[0].0, Site::K);
        let qkv = split_infusion(&z, 4, InfusionSites::Qkv).unwrap();
        assert_eq!(qkv.len(), 3);
        assert_eq!(qkv[2].1.get2(0, 0), z.get2(0, 8));
        assert!(split_infusion(&z, 5, InfusionSites::Qv).is_err());
    }

    #[test]
    fn eval_masks_are_deterministic_per_tag() {
        let cfg = cfg(Pattern::Top2Beta);
        let make = |tag: &str| {
            let weights = AdapterWeights::<f64>::init(&cfg, 1, 16, 5);
            let mut g = Graph::new();
            let mut pass = AdapterPass::eval(&cfg, 42, tag);
            let mut rng = stream(1, "h");
            let h = g.constant(normal_tensor(&mut rng, &[6, 16], 0.0, 1.0));
            let wz = g.constant(weights.w_z[0].clone());
            let wb = g.constant(weights.w_b[0].clone());
            pass.apply_layer(&mut g, &cfg, wz, wb, h).unwrap();
            pass.retained.remove(0)
        };
        assert_eq!(make("val/3"), make("val/3"));
        let other: Vec<Vec<bool>> = (0..8).map(|i| make(&format!("val/{i}"))).collect();
        assert!(other.windows(2).any(|w| w[0] != w[1]), "tags never vary the mask");
    }

    #[test]
    fn activation_stats_track_frequencies() {
        let mut stats = ActivationStats::new(&["refseg", "caption"], 2, 4);
        stats
            .record(0, &[vec![true, false, true, false], vec![true, false, false, false]])
            .unwrap();
        stats
            .record(0, &[vec![true, false, false, false], vec![true, false, false, true]])
            .unwrap();
        stats.record(1, &[vec![false, true, false, true], vec![false, true, false, true]]).unwrap();
        assert_eq!(stats.passes(0), 2);
        assert_eq!(stats.frequency(0, 0, 0), 1.0);
        assert_eq!(stats.frequency(0, 0, 2), 0.5);
        assert_eq!(stats.frequency(0, 1, 3), 0.5);
        // Signatures: refseg top-2 by layer mean = {0, 2 or 3 tie -> 2}.
        assert_eq!(stats.signature(0, 2), vec![0, 2]);
        assert_eq!(stats.signature(1, 2), vec![1, 3]);
        let j = stats.jaccard_matrix(2);
        assert_eq!(j[0][0], 1.0);
        assert_eq!(j[1][1], 1.0);
        assert_eq!(j[0][1], j[1][0]);
        assert_eq!(j[0][1], 0.0);
        let csv = stats.csv();
        assert!(csv.starts_with("task,layer,neuron,frequency\n"));
        assert!(csv.contains("refseg,0,0,1.000000"));
        assert_eq!(csv.lines().count(), 1 + 2 * 2 * 4);
    }

    #[test]
    fn jaccard_edge_cases() {
        assert_eq!(jaccard(&[], &[]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(jaccard(&[1, 2, 3], &[2, 3, 4]), 0.5);
    }
}
