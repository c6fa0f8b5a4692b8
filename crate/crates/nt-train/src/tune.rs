//! The tuning loop. The backbone stays frozen (hash-checked every epoch);
//! only the task-token embedding rows, the per-layer adapter projections,
//! the mask decoder, and the generation head receive gradient. Batches are
//! task-homogeneous and rotate round-robin through the task mix.

use rand::seq::SliceRandom;

use nt_core::optim::{cosine_lr, Adam};
use nt_core::rng::stream;
use nt_core::{Graph, NodeId, Tensor};
use nt_mmud::{Sample, GRID};
use nt_model::backbone::{forward, shift_targets, AdapterHook, BackboneWeights, TaskRows};
use nt_model::heads::{decode_mask, gen_predict, mse_loss, soft_dice, GenHead, MaskDecoderWeights};
use nt_model::sparse::{AdapterPass, AdapterWeights};

use crate::assemble::{Assembler, Instance, TaskKind};
use crate::config::RunConfig;
use crate::error::{Result, TrainError};

/// Everything that receives gradient during tuning.
#[derive(Clone)]
pub struct Tunable {
    pub task_rows: TaskRows<f64>,
    pub adapter: AdapterWeights<f64>,
    pub decoder: MaskDecoderWeights<f64>,
    pub gen: GenHead<f64>,
}

pub struct TunableNodes {
    pub task_rows: NodeId,
    /// (w_z, w_b) per backbone layer.
    pub adapter: Vec<(NodeId, NodeId)>,
    pub decoder: nt_model::heads::MaskDecoderNodes,
    pub gen: NodeId,
}

impl Tunable {
    pub fn init(cfg: &RunConfig, backbone: &BackboneWeights<f64>) -> Result<Self> {
        let d_h = backbone.cfg.d_h;
        let g = GRID / cfg.backbone.patch;
        Ok(Tunable {
            task_rows: TaskRows::from_frozen(backbone),
            adapter: AdapterWeights::init(&cfg.adapter, backbone.cfg.layers, d_h, cfg.seed),
            decoder: MaskDecoderWeights::init(cfg.heads.decoder, d_h, (g, g), cfg.seed)?,
            gen: GenHead::init(cfg.heads.d_c, d_h, cfg.seed),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut out = vec![("tokens/task_rows".to_string(), &self.task_rows.rows)];
        for (k, (wz, wb)) in self.adapter.w_z.iter().zip(&self.adapter.w_b).enumerate() {
            out.push((format!("adapter/layer{k}/w_z"), wz));
            out.push((format!("adapter/layer{k}/w_b"), wb));
        }
        out.extend(self.decoder.named());
        out.push(("heads/gen/w".to_string(), &self.gen.w));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        let mut out = vec![("tokens/task_rows".to_string(), &mut self.task_rows.rows)];
        for (k, (wz, wb)) in self.adapter.w_z.iter_mut().zip(&mut self.adapter.w_b).enumerate() {
            out.push((format!("adapter/layer{k}/w_z"), wz));
            out.push((format!("adapter/layer{k}/w_b"), wb));
        }
        out.extend(self.decoder.named_mut());
        out.push(("heads/gen/w".to_string(), &mut self.gen.w));
        out
    }

    /// Inserts every tunable tensor as a trainable leaf. Node order matches
    /// `named()` so gradient slots line up.
    pub fn insert(&self, g: &mut Graph<f64>) -> TunableNodes {
        let task_rows = g.leaf(self.task_rows.rows.clone(), true);
        let adapter = self
            .adapter
            .w_z
            .iter()
            .zip(&self.adapter.w_b)
            .map(|(wz, wb)| (g.leaf(wz.clone(), true), g.leaf(wb.clone(), true)))
            .collect();
        let decoder = self.decoder.insert(g, true);
        let gen = self.gen.insert(g, true);
        TunableNodes { task_rows, adapter, decoder, gen }
    }

    /// Graph ids in `named()` order.
    pub fn node_slots(nodes: &TunableNodes) -> Vec<NodeId> {
        let mut out = vec![nodes.task_rows];
        for &(wz, wb) in &nodes.adapter {
            out.push(wz);
            out.push(wb);
        }
        let d = &nodes.decoder;
        out.push(d.in_proj);
        out.push(d.obj_proj);
        for s in &d.stages {
            out.push(s.kernel);
            out.push(s.pos);
            for b in &s.blocks {
                out.extend_from_slice(&[b.gain, b.wq, b.wk, b.wv, b.wo]);
            }
        }
        out.push(d.out_proj);
        out.push(nodes.gen);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Content hash over named tensors; the frozen-backbone guard compares this
/// before and after every epoch.
pub fn tensor_hash(named: &[(String, &Tensor<f64>)]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        h.update([0]);
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Loss components measured on one instance, already scaled into the batch
/// objective.
struct InstanceLoss {
    node: NodeId,
    l_txt: f64,
    dice: Vec<f64>,
    mse: Option<f64>,
}

/// Shares of the batch objective: text losses average over instances, dice
/// terms over every mask in the batch, mse terms over every target.
struct BatchNorms {
    text: f64,
    seg: f64,
    gen: f64,
}

fn instance_loss(
    g: &mut Graph<f64>,
    backbone: &BackboneWeights<f64>,
    tunable: &Tunable,
    nodes: &TunableNodes,
    cfg: &RunConfig,
    inst: &Instance,
    pass: &mut AdapterPass,
    norms: &BatchNorms,
) -> Result<InstanceLoss> {
    let bnodes = backbone.insert(g, false);
    let hook = AdapterHook { cfg: &cfg.adapter, pass, layer_nodes: &nodes.adapter };
    let out = forward(g, &backbone.cfg, &bnodes, &inst.seq, Some(nodes.task_rows), Some(hook))?;
    let (targets, mask) = shift_targets(&inst.seq);
    let l_txt = g.cross_entropy_next_token(out.logits, &targets, &mask)?;
    let mut total = g.scale(l_txt, norms.text);

    let mut dice_vals = Vec::with_capacity(inst.masks.len());
    if !inst.masks.is_empty() {
        let image_rows: Vec<usize> = (0..inst.seq.image_len).collect();
        let image_hidden = g.gather_rows(out.final_hidden, &image_rows)?;
        for (pos, gt) in &inst.masks {
            let obj_hidden = g.gather_rows(out.final_hidden, &[*pos])?;
            let probs = decode_mask(g, &tunable.decoder, &nodes.decoder, image_hidden, obj_hidden)?;
            let dice = soft_dice(g, probs, gt)?;
            dice_vals.push(g.value(dice).data()[0]);
            let scaled = g.scale(dice, cfg.train.lambda_seg * norms.seg);
            total = g.add(total, scaled)?;
        }
    }

    let mut mse_val = None;
    if let Some((pos, target)) = &inst.gen {
        let hidden = g.gather_rows(out.final_hidden, &[*pos])?;
        let pred = gen_predict(g, nodes.gen, hidden)?;
        let mse = mse_loss(g, pred, target)?;
        mse_val = Some(g.value(mse).data()[0]);
        let scaled = g.scale(mse, cfg.train.lambda_gen * norms.gen);
        total = g.add(total, scaled)?;
    }

    Ok(InstanceLoss { node: total, l_txt: g.value(l_txt).data()[0], dice: dice_vals, mse: mse_val })
}

pub struct TuneReport {
    pub steps: u64,
    /// Mean combined step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// "step,task,l_txt,l_seg,l_gen,total" rows.
    pub csv: String,
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Tunes in place. On a non-finite loss the tunable is rolled back to the
/// last completed epoch and the error reports where training stood.
pub fn tune(
    cfg: &RunConfig,
    backbone: &BackboneWeights<f64>,
    assembler: &Assembler,
    samples: &[Sample],
    tunable: &mut Tunable,
) -> Result<TuneReport> {
    if samples.is_empty() {
        return Err(TrainError::MissingInput("empty training split".into()));
    }
    let tasks = cfg.tasks();
    let batch = cfg.train.batch;
    // Eligible sample indices per task; fixed across epochs.
    let eligible: Vec<Vec<usize>> = tasks
        .iter()
        .map(|&t| {
            (0..samples.len())
                .filter(|&i| t != TaskKind::ReaSeg || samples[i].reasoning.is_some())
                .collect()
        })
        .collect();
    for (t, e) in tasks.iter().zip(&eligible) {
        if e.is_empty() {
            return Err(TrainError::MissingInput(format!(
                "task {} has no eligible samples",
                t.name()
            )));
        }
    }
    let steps_per_epoch: u64 =
        eligible.iter().map(|e| e.len().div_ceil(batch) as u64).sum();
    let total_steps = steps_per_epoch * cfg.train.epochs as u64;

    let frozen_hash = tensor_hash(&backbone.named());
    let n_slots = tunable.named().len();
    let mut opt = Adam::new(n_slots);
    let mut last_good = tunable.clone();
    let mut csv = String::from("step,task,l_txt,l_seg,l_gen,total\n");
    let mut epoch_losses = Vec::with_capacity(cfg.train.epochs);
    let mut global_step: u64 = 0;
    let mut pass_id: u64 = 0;

    for epoch in 0..cfg.train.epochs {
        let mut queues: Vec<std::collections::VecDeque<usize>> = tasks
            .iter()
            .zip(&eligible)
            .map(|(t, e)| {
                let mut order = e.clone();
                order.shuffle(&mut stream(cfg.seed, &format!("tune/order/{epoch}/{}", t.name())));
                order.into()
            })
            .collect();
        let mut step_losses = Vec::new();
        while queues.iter().any(|q| !q.is_empty()) {
            for (ti, task) in tasks.iter().enumerate() {
                let picks: Vec<usize> = {
                    let q = &mut queues[ti];
                    (0..batch.min(q.len())).filter_map(|_| q.pop_front()).collect()
                };
                if picks.is_empty() {
                    continue;
                }
                let mut instances = Vec::with_capacity(picks.len());
                for i in picks {
                    let inst = assembler
                        .train_instance(&samples[i], *task, epoch)?
                        .expect("eligibility filtered upfront");
                    instances.push(inst);
                }
                let n_masks: usize = instances.iter().map(|i| i.masks.len()).sum();
                let n_gens: usize = instances.iter().filter(|i| i.gen.is_some()).count();
                let norms = BatchNorms {
                    text: 1.0 / instances.len() as f64,
                    seg: if n_masks > 0 { 1.0 / n_masks as f64 } else { 0.0 },
                    gen: if n_gens > 0 { 1.0 / n_gens as f64 } else { 0.0 },
                };

                let mut acc: Vec<Option<Tensor<f64>>> = vec![None; n_slots];
                let (mut txt_sum, mut dice_sum, mut mse_sum) = (0.0, 0.0, 0.0);
                let mut batch_loss = 0.0;
                for inst in &instances {
                    let mut g = Graph::new();
                    let nodes = tunable.insert(&mut g);
                    let mut pass = AdapterPass::train(&cfg.adapter, cfg.seed, pass_id);
                    pass_id += 1;
                    let il =
                        instance_loss(&mut g, backbone, tunable, &nodes, cfg, inst, &mut pass, &norms)?;
                    batch_loss += g.value(il.node).data()[0];
                    txt_sum += il.l_txt;
                    dice_sum += il.dice.iter().sum::<f64>();
                    mse_sum += il.mse.unwrap_or(0.0);
                    let grads = g.backward(il.node)?;
                    let slots = Tunable::node_slots(&nodes);
                    nt_model::backbone::accumulate(&mut acc, &slots, &grads);
                }

                if !batch_loss.is_finite() {
                    *tunable = last_good;
                    let good = if epoch == 0 {
                        "initialization".to_string()
                    } else {
                        format!("the end of epoch {}", epoch - 1)
                    };
                    return Err(TrainError::Numerical(format!(
                        "non-finite loss at step {global_step} (task {}, epoch {epoch}); \
                         rolled back to {good}",
                        task.name(),
                    )));
                }

                let lr = cosine_lr(cfg.train.lr, global_step, total_steps);
                let mut named = tunable.named_mut();
                let mut params: Vec<&mut Tensor<f64>> =
                    named.iter_mut().map(|(_, t)| &mut **t).collect();
                opt.step(&mut params, &acc, lr);
                drop(named);

                let l_txt = txt_sum / instances.len() as f64;
                let l_seg = (n_masks > 0).then(|| dice_sum / n_masks as f64);
                let l_gen = (n_gens > 0).then(|| mse_sum / n_gens as f64);
                csv.push_str(&format!(
                    "{global_step},{},{l_txt:.6},{},{},{batch_loss:.6}\n",
                    task.name(),
                    format_opt(l_seg),
                    format_opt(l_gen),
                ));
                step_losses.push(batch_loss);
                global_step += 1;
            }
        }
        let epoch_hash = tensor_hash(&backbone.named());
        assert_eq!(epoch_hash, frozen_hash, "frozen backbone changed during epoch {epoch}");
        epoch_losses.push(step_losses.iter().sum::<f64>() / step_losses.len() as f64);
        last_good = tunable.clone();
        log::info!(
            "epoch {epoch}: mean step loss {:.6} over {} steps",
            epoch_losses[epoch],
            step_losses.len()
        );
    }
    debug_assert_eq!(global_step, total_steps);
    Ok(TuneReport { steps: global_step, epoch_losses, csv })
}
