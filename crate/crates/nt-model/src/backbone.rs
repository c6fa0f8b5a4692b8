//! Decoder-only transformer backbone: pre-norm RMS blocks with SiLU FFNs, no
//! biases, learned positions, and a tied unembedding. Task-token rows can be
//! spliced over the frozen embedding table, and the sparse task network can
//! add per-site deltas to the attention projections.

use serde::{Deserialize, Serialize};

use nt_core::optim::{cosine_lr, Adam};
use nt_core::rng::{normal_tensor, stream};
use nt_core::{argmax, Graph, NodeId, Scalar, Tensor};

use crate::error::{contract, ModelError, Result};
use crate::sparse::{AdapterPass, AdapterWeights, Site, SparseTaskConfig};
use crate::token::{assemble_input, TokenSequence, EOS, GEN, OBJ_BASE};

/// Rows 3..=11 of the embedding table are the task tokens.
pub const TASK_ROW_OFFSET: usize = OBJ_BASE as usize;
pub const TASK_ROWS: usize = (GEN - OBJ_BASE + 1) as usize;

pub const FFN_MULT: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_h: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_h == 0 || self.max_len == 0 {
            return Err(contract("backbone_config", "layers, d_h and max_len must be positive"));
        }
        if self.heads == 0 || self.d_h % self.heads != 0 {
            return Err(contract(
                "backbone_config",
                format!("heads {} must divide d_h {}", self.heads, self.d_h),
            ));
        }
        if self.vocab < TASK_ROW_OFFSET + TASK_ROWS {
            return Err(contract(
                "backbone_config",
                format!("vocab {} cannot hold the special tokens", self.vocab),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights<F: Scalar> {
    pub norm1: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub norm2: Tensor<F>,
    /// [FFN_MULT*d x d]
    pub w1: Tensor<F>,
    /// [d x FFN_MULT*d]
    pub w2: Tensor<F>,
}

impl<F: Scalar> LayerWeights<F> {
    pub fn init(d: usize, seed: u64, name: &str) -> Self {
        let mut rng = stream(seed, name);
        LayerWeights {
            norm1: Tensor::full(&[d], F::one()),
            wq: normal_tensor(&mut rng, &[d, d], 0.0, 0.02),
            wk: normal_tensor(&mut rng, &[d, d], 0.0, 0.02),
            wv: normal_tensor(&mut rng, &[d, d], 0.0, 0.02),
            wo: normal_tensor(&mut rng, &[d, d], 0.0, 0.02),
            norm2: Tensor::full(&[d], F::one()),
            w1: normal_tensor(&mut rng, &[FFN_MULT * d, d], 0.0, 0.02),
            w2: normal_tensor(&mut rng, &[d, FFN_MULT * d], 0.0, 0.02),
        }
    }

    pub fn insert(&self, g: &mut Graph<F>, trainable: bool) -> LayerNodes {
        let mut put = |t: &Tensor<F>| {
            if trainable {
                g.leaf(t.clone(), true)
            } else {
                g.constant(t.clone())
            }
        };
        LayerNodes {
            norm1: put(&self.norm1),
            wq: put(&self.wq),
            wk: put(&self.wk),
            wv: put(&self.wv),
            wo: put(&self.wo),
            norm2: put(&self.norm2),
            w1: put(&self.w1),
            w2: put(&self.w2),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<F>)> {
        vec![
            (format!("{prefix}/norm1"), &self.norm1),
            (format!("{prefix}/wq"), &self.wq),
            (format!("{prefix}/wk"), &self.wk),
            (format!("{prefix}/wv"), &self.wv),
            (format!("{prefix}/wo"), &self.wo),
            (format!("{prefix}/norm2"), &self.norm2),
            (format!("{prefix}/w1"), &self.w1),
            (format!("{prefix}/w2"), &self.w2),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            (format!("{prefix}/norm1"), &mut self.norm1),
            (format!("{prefix}/wq"), &mut self.wq),
            (format!("{prefix}/wk"), &mut self.wk),
            (format!("{prefix}/wv"), &mut self.wv),
            (format!("{prefix}/wo"), &mut self.wo),
            (format!("{prefix}/norm2"), &mut self.norm2),
            (format!("{prefix}/w1"), &mut self.w1),
            (format!("{prefix}/w2"), &mut self.w2),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub norm1: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub norm2: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
}

#[derive(Clone, Debug)]
pub struct BackboneWeights<F: Scalar> {
    pub cfg: BackboneConfig,
    pub tok_embed: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm: Tensor<F>,
}

impl<F: Scalar> BackboneWeights<F> {
    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, "backbone/embed");
        let tok_embed = normal_tensor(&mut rng, &[cfg.vocab, cfg.d_h], 0.0, 0.02);
        let pos_embed = normal_tensor(&mut rng, &[cfg.max_len, cfg.d_h], 0.0, 0.02);
        let layers = (0..cfg.layers)
            .map(|k| LayerWeights::init(cfg.d_h, seed, &format!("backbone/layer{k}")))
            .collect();
        let final_norm = Tensor::full(&[cfg.d_h], F::one());
        Ok(BackboneWeights { cfg, tok_embed, pos_embed, layers, final_norm })
    }

    pub fn insert(&self, g: &mut Graph<F>, trainable: bool) -> BackboneNodes {
        let mut put = |t: &Tensor<F>| {
            if trainable {
                g.leaf(t.clone(), true)
            } else {
                g.constant(t.clone())
            }
        };
        let tok_embed = put(&self.tok_embed);
        let pos_embed = put(&self.pos_embed);
        let layers = self.layers.iter().map(|l| l.insert(g, trainable)).collect();
        let final_norm = if trainable {
            g.leaf(self.final_norm.clone(), true)
        } else {
            g.constant(self.final_norm.clone())
        };
        BackboneNodes { tok_embed, pos_embed, layers, final_norm }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("backbone/tok_embed".to_string(), &self.tok_embed),
            ("backbone/pos_embed".to_string(), &self.pos_embed),
        ];
        for (k, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("backbone/layer{k}")));
        }
        out.push(("backbone/final_norm".to_string(), &self.final_norm));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("backbone/tok_embed".to_string(), &mut self.tok_embed),
            ("backbone/pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (k, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut(&format!("backbone/layer{k}")));
        }
        out.push(("backbone/final_norm".to_string(), &mut self.final_norm));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct BackboneNodes {
    pub tok_embed: NodeId,
    pub pos_embed: NodeId,
    pub layers: Vec<LayerNodes>,
    pub final_norm: NodeId,
}

/// Trainable overlay for the task-token rows of the embedding table.
/// Starting from a copy of the frozen rows keeps the tuned model exactly at
/// the backbone's behavior on step zero.
#[derive(Clone, Debug)]
pub struct TaskRows<F: Scalar> {
    pub rows: Tensor<F>,
}

impl<F: Scalar> TaskRows<F> {
    pub fn from_frozen(backbone: &BackboneWeights<F>) -> Self {
        let d = backbone.cfg.d_h;
        let mut data = Vec::with_capacity(TASK_ROWS * d);
        for r in TASK_ROW_OFFSET..TASK_ROW_OFFSET + TASK_ROWS {
            data.extend_from_slice(backbone.tok_embed.row(r));
        }
        TaskRows { rows: Tensor::new(&[TASK_ROWS, d], data).expect("task rows shape") }
    }
}

/// Per-layer sparse infusion wiring for one forward pass.
pub struct AdapterHook<'a> {
    pub cfg: &'a SparseTaskConfig,
    pub pass: &'a mut AdapterPass,
    /// (w_z, w_b) node per layer, same order as the backbone layers.
    pub layer_nodes: &'a [(NodeId, NodeId)],
}

pub struct ForwardOutput {
    /// [L x vocab]
    pub logits: NodeId,
    /// [L x d_h], after the final norm.
    pub final_hidden: NodeId,
    /// Per layer, [heads*L x L] causal attention probabilities.
    pub attn_probs: Vec<NodeId>,
}

/// One pre-norm block: attention with optional per-site deltas, then FFN,
/// both with residual connections. Returns the block output and the
/// attention probabilities.
pub fn layer_forward<F: Scalar>(
    g: &mut Graph<F>,
    ln: &LayerNodes,
    h: NodeId,
    heads: usize,
    deltas: Option<&[(Site, NodeId)]>,
) -> Result<(NodeId, NodeId)> {
    let d = g.shape(h)[1];
    let hn = g.rms_norm(h, ln.norm1)?;
    let mut q = g.matmul_nt(hn, ln.wq)?;
    let mut k = g.matmul_nt(hn, ln.wk)?;
    let mut v = g.matmul_nt(hn, ln.wv)?;
    if let Some(deltas) = deltas {
        for &(site, delta) in deltas {
            match site {
                Site::Q => q = g.add(q, delta)?,
                Site::K => k = g.add(k, delta)?,
                Site::V => v = g.add(v, delta)?,
            }
        }
    }
    let scale = F::from_f64(1.0 / ((d / heads) as f64).sqrt());
    let scores = g.head_scores(q, k, heads, scale)?;
    let probs = g.causal_softmax(scores, heads)?;
    let mixed = g.head_mix(probs, v, heads)?;
    let attn_out = g.matmul_nt(mixed, ln.wo)?;
    let h = g.add(h, attn_out)?;
    let hn2 = g.rms_norm(h, ln.norm2)?;
    let up = g.matmul_nt(hn2, ln.w1)?;
    let act = g.silu(up);
    let down = g.matmul_nt(act, ln.w2)?;
    let h = g.add(h, down)?;
    Ok((h, probs))
}

/// Full forward over an assembled sequence. `task_rows`, when present, is a
/// [TASK_ROWS x d_h] node spliced over the embedding table for both the
/// input embedding and the tied unembedding.
pub fn forward<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &BackboneConfig,
    nodes: &BackboneNodes,
    seq: &TokenSequence<F>,
    task_rows: Option<NodeId>,
    mut adapter: Option<AdapterHook<'_>>,
) -> Result<ForwardOutput> {
    let l = seq.len();
    if l == 0 {
        return Err(contract("forward", "empty sequence"));
    }
    if l > cfg.max_len {
        return Err(contract("forward", format!("length {l} exceeds max_len {}", cfg.max_len)));
    }
    let table = match task_rows {
        Some(rows) => g.splice_rows(nodes.tok_embed, rows, TASK_ROW_OFFSET)?,
        None => nodes.tok_embed,
    };
    let ids: Vec<usize> = seq.text_ids.iter().map(|&i| i as usize).collect();
    for &id in &ids {
        if id >= cfg.vocab {
            return Err(contract("forward", format!("token id {id} outside vocab {}", cfg.vocab)));
        }
    }
    let text_emb = g.gather_rows(table, &ids)?;
    let mut h = match &seq.patches {
        Some(p) => {
            if p.shape()[1] != cfg.d_h {
                return Err(contract(
                    "forward",
                    format!("patch width {} != d_h {}", p.shape()[1], cfg.d_h),
                ));
            }
            let pn = g.constant(p.clone());
            g.concat_rows(pn, text_emb)?
        }
        None => text_emb,
    };
    let pos_ids: Vec<usize> = (0..l).collect();
    let pos = g.gather_rows(nodes.pos_embed, &pos_ids)?;
    h = g.add(h, pos)?;

    if let Some(hook) = adapter.as_ref() {
        if hook.layer_nodes.len() != cfg.layers {
            return Err(contract(
                "forward",
                format!("adapter covers {} layers, backbone has {}", hook.layer_nodes.len(), cfg.layers),
            ));
        }
    }

    let mut attn_probs = Vec::with_capacity(cfg.layers);
    for (k, ln) in nodes.layers.iter().enumerate() {
        let deltas = match adapter.as_mut() {
            Some(hook) => {
                let hn = g.rms_norm(h, ln.norm1)?;
                let (wz, wb) = hook.layer_nodes[k];
                let delta_nodes = hook.pass.apply_layer(g, hook.cfg, wz, wb, hn)?;
                Some(
                    hook.cfg
                        .sites
                        .order()
                        .iter()
                        .copied()
                        .zip(delta_nodes)
                        .collect::<Vec<(Site, NodeId)>>(),
                )
            }
            None => None,
        };
        let (next, probs) = layer_forward(g, ln, h, cfg.heads, deltas.as_deref())?;
        h = next;
        attn_probs.push(probs);
    }
    let final_hidden = g.rms_norm(h, nodes.final_norm)?;
    let logits = g.matmul_nt(final_hidden, table)?;
    Ok(ForwardOutput { logits, final_hidden, attn_probs })
}

/// Next-token targets and mask for a supervised sequence: every position
/// predicts its successor, and only positions whose successor is flagged in
/// the sequence loss mask contribute.
pub fn shift_targets<F: Scalar>(seq: &TokenSequence<F>) -> (Vec<usize>, Vec<bool>) {
    let l = seq.len();
    let mut targets = vec![0usize; l];
    let mut mask = vec![false; l];
    for t in 0..l.saturating_sub(1) {
        let next = t + 1;
        if next >= seq.image_len {
            targets[t] = seq.text_ids[next - seq.image_len] as usize;
            mask[t] = seq.loss_mask[next];
        }
    }
    (targets, mask)
}

pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Language-model pretraining on raw token sequences ([BOS] text [EOS],
/// every position supervised). Trains every backbone tensor with Adam under
/// cosine decay; returns the per-step batch losses.
pub fn pretrain_lm<F: Scalar>(
    weights: &mut BackboneWeights<F>,
    corpus: &[Vec<u32>],
    steps: u64,
    batch: usize,
    base_lr: f64,
    seed: u64,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(contract("pretrain_lm", "empty corpus"));
    }
    let n_slots = weights.named().len();
    let mut opt = Adam::new(n_slots);
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let mut order = stream(seed, &format!("backbone-pretrain/batch/{step}"));
        let picks: Vec<usize> =
            (0..batch).map(|_| rand::Rng::gen_range(&mut order, 0..corpus.len())).collect();
        let mut acc: Vec<Option<Tensor<F>>> = vec![None; n_slots];
        let mut batch_loss = 0.0;
        for &pick in &picks {
            let seq = assemble_input::<F>(None, &[], &corpus[pick], weights.cfg.max_len)?;
            let mut g = Graph::new();
            let nodes = weights.insert(&mut g, true);
            let out = forward(&mut g, &weights.cfg, &nodes, &seq, None, None)?;
            let (targets, mask) = shift_targets(&seq);
            let loss = g.cross_entropy_next_token(out.logits, &targets, &mask)?;
            let scaled = g.scale(loss, F::from_f64(1.0 / batch as f64));
            batch_loss += g.value(scaled).data()[0].as_f64();
            let grads = g.backward(scaled)?;
            let slot_ids: Vec<NodeId> = node_slots(&nodes);
            accumulate(&mut acc, &slot_ids, &grads);
        }
        if !batch_loss.is_finite() {
            return Err(ModelError::Diverged(format!("pretrain step {step}: loss {batch_loss}")));
        }
        losses.push(batch_loss);
        let lr = cosine_lr(base_lr, step, steps);
        let mut named = weights.named_mut();
        let mut params: Vec<&mut Tensor<F>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        opt.step(&mut params, &acc, lr);
    }
    let initial_loss = losses[0];
    let final_loss = *losses.last().expect("at least one step");
    Ok(PretrainReport { initial_loss, final_loss, losses })
}

/// Graph node ids of the backbone tensors, in `named()` order.
pub fn node_slots(nodes: &BackboneNodes) -> Vec<NodeId> {
    let mut out = vec![nodes.tok_embed, nodes.pos_embed];
    for l in &nodes.layers {
        out.extend_from_slice(&[l.norm1, l.wq, l.wk, l.wv, l.wo, l.norm2, l.w1, l.w2]);
    }
    out.push(nodes.final_norm);
    out
}

/// Adds this graph's gradients into the accumulator slots.
pub fn accumulate<F: Scalar>(
    acc: &mut [Option<Tensor<F>>],
    slot_ids: &[NodeId],
    grads: &nt_core::Gradients<F>,
) {
    for (slot, &id) in slot_ids.iter().enumerate() {
        if let Some(g) = grads.get(id) {
            match &mut acc[slot] {
                None => acc[slot] = Some(g.clone()),
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
}

pub struct Generated<F: Scalar> {
    /// Tokens emitted before EOS (EOS excluded).
    pub answer: Vec<u32>,
    pub hit_eos: bool,
    /// Final-norm hidden states of the harvest pass, [L x d_h].
    pub final_hidden: Tensor<F>,
    /// Text ids of the harvested sequence.
    pub text_ids: Vec<u32>,
    pub image_len: usize,
    /// Adapter retention per layer from the harvest pass (empty without an
    /// adapter).
    pub retained: Vec<Vec<bool>>,
    /// Attention probabilities per layer from the harvest pass.
    pub attn: Vec<Tensor<F>>,
}

/// Sparse-network weights plus the eval identity of one decoded sample.
pub struct EvalAdapter<'a, F: Scalar> {
    pub cfg: &'a SparseTaskConfig,
    pub weights: &'a AdapterWeights<F>,
    pub seed: u64,
    pub tag: &'a str,
}

/// Greedy decoding with a full re-forward per emitted token, then one
/// harvest pass over the finished sequence (with EOS when reached) that
/// yields hidden states, attention maps, and adapter retention.
pub fn greedy_generate<F: Scalar>(
    backbone: &BackboneWeights<F>,
    task_rows: Option<&TaskRows<F>>,
    adapter: Option<&EvalAdapter<'_, F>>,
    prompt: &TokenSequence<F>,
    max_new: usize,
) -> Result<Generated<F>> {
    if !prompt.loss_mask.iter().all(|&m| !m) {
        return Err(contract("greedy_generate", "prompt must not carry answer positions"));
    }
    let cfg = &backbone.cfg;
    let mut answer: Vec<u32> = Vec::new();
    let mut hit_eos = false;
    for _ in 0..max_new {
        if prompt.len() + answer.len() + 1 > cfg.max_len {
            break;
        }
        let seq = assemble_input(prompt.patches.clone(), prompt.prompt_ids(), &answer, cfg.max_len)?;
        // Re-assembly appends EOS after a non-empty answer; decode on the
        // sequence without it.
        let seq = strip_eos(seq, !answer.is_empty());
        let (g, out, _) = run_forward(backbone, task_rows, adapter, &seq)?;
        let logits = g.value(out.logits);
        let last = logits.row(logits.shape()[0] - 1);
        let next = argmax(last) as u32;
        if next == EOS {
            hit_eos = true;
            break;
        }
        answer.push(next);
    }
    let final_seq = if hit_eos {
        assemble_input(prompt.patches.clone(), prompt.prompt_ids(), &answer, cfg.max_len)?
    } else {
        let seq = assemble_input(prompt.patches.clone(), prompt.prompt_ids(), &answer, cfg.max_len)?;
        strip_eos(seq, !answer.is_empty())
    };
    let (g, out, retained) = run_forward(backbone, task_rows, adapter, &final_seq)?;
    let final_hidden = g.value(out.final_hidden).clone();
    let attn = out.attn_probs.iter().map(|&p| g.value(p).clone()).collect();
    Ok(Generated {
        answer,
        hit_eos,
        final_hidden,
        text_ids: final_seq.text_ids.clone(),
        image_len: final_seq.image_len,
        retained,
        attn,
    })
}

fn strip_eos<F: Scalar>(mut seq: TokenSequence<F>, had_answer: bool) -> TokenSequence<F> {
    if had_answer {
        debug_assert_eq!(seq.text_ids.pop(), Some(EOS));
        seq.loss_mask.pop();
        seq.loss_mask.iter_mut().for_each(|m| *m = false);
    }
    seq
}

/// Forward with frozen weights; returns the finished graph, the output node
/// ids, and the adapter retention record (empty without an adapter).
fn run_forward<F: Scalar>(
    backbone: &BackboneWeights<F>,
    task_rows: Option<&TaskRows<F>>,
    adapter: Option<&EvalAdapter<'_, F>>,
    seq: &TokenSequence<F>,
) -> Result<(Graph<F>, ForwardOutput, Vec<Vec<bool>>)> {
    let mut g = Graph::new();
    let nodes = backbone.insert(&mut g, false);
    let rows = task_rows.map(|t| g.constant(t.rows.clone()));
    match adapter {
        None => {
            let out = forward(&mut g, &backbone.cfg, &nodes, seq, rows, None)?;
            Ok((g, out, Vec::new()))
        }
        Some(ad) => {
            let layer_nodes: Vec<(NodeId, NodeId)> = ad
                .weights
                .w_z
                .iter()
                .zip(&ad.weights.w_b)
                .map(|(wz, wb)| (g.constant(wz.clone()), g.constant(wb.clone())))
                .collect();
            let mut pass = AdapterPass::eval(ad.cfg, ad.seed, ad.tag);
            let hook = AdapterHook { cfg: ad.cfg, pass: &mut pass, layer_nodes: &layer_nodes };
            let out = forward(&mut g, &backbone.cfg, &nodes, seq, rows, Some(hook))?;
            Ok((g, out, pass.retained))
        }
    }
}
