//! Central-difference verification of every trainable gradient path, in
//! f64. The gradient test suite and the acceptance report both run these.
//!
//! Retention masks are pinned to constants inside each check: the finite
//! difference probes must evaluate the same graph the analytic pass
//! differentiated, and a value-dependent mask could flip under perturbation.

use nt_core::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPSILON};
use nt_core::rng::{normal_tensor, stream};
use nt_core::{NodeId, Tensor, TensorError};
use rand::Rng;

use crate::backbone::{forward, shift_targets, AdapterHook, BackboneConfig, BackboneWeights};
use crate::heads::{
    combine_losses, decode_mask, gen_predict, mse_loss, soft_dice, DecoderStageNodes,
    MaskDecoderConfig, MaskDecoderNodes, MaskDecoderWeights, SpatialBlockNodes,
};
use crate::sparse::{AdapterPass, InfusionSites, Pattern, SparseTaskConfig};
use crate::token::assemble_input;

type CoreResult<T> = nt_core::error::Result<T>;

fn lift<T>(r: crate::Result<T>) -> CoreResult<T> {
    r.map_err(|e| TensorError::Contract {
        op: "gradcheck_build",
        expected: "model op to succeed".into(),
        got: e.to_string(),
    })
}

/// Random 0/1 retention mask with at least one live entry per row.
fn fixed_mask(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor<f64> {
    let mut rng = stream(seed, name);
    let mut data = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let forced = rng.gen_range(0..cols);
        for c in 0..cols {
            if c == forced || rng.gen_bool(0.45) {
                data[r * cols + c] = 1.0;
            }
        }
    }
    Tensor::new(&[rows, cols], data).expect("mask shape")
}

/// Two adapter layers wired exactly as the model wires them: normalized
/// hidden, projection to the task state, EMA carry, constant retention
/// mask, back-projection, per-site slices.
pub fn adapter_chain_report() -> CoreResult<GradCheckReport> {
    let (l, d_h, d_z) = (3usize, 10usize, 6usize);
    let alpha = 0.9f64;
    let mut rng = stream(77, "gradcheck/adapter-params");
    let params = vec![
        ("h1", normal_tensor::<f64, _>(&mut rng, &[l, d_h], 0.0, 0.5)),
        ("h2", normal_tensor(&mut rng, &[l, d_h], 0.0, 0.5)),
        ("gain1", normal_tensor(&mut rng, &[d_h], 1.0, 0.1)),
        ("gain2", normal_tensor(&mut rng, &[d_h], 1.0, 0.1)),
        ("wz1", normal_tensor(&mut rng, &[d_z, d_h], 0.0, 0.3)),
        ("wz2", normal_tensor(&mut rng, &[d_z, d_h], 0.0, 0.3)),
        ("wb1", normal_tensor(&mut rng, &[2 * d_h, d_z], 0.0, 0.3)),
        ("wb2", normal_tensor(&mut rng, &[2 * d_h, d_z], 0.0, 0.3)),
    ];
    let mask1 = fixed_mask(77, "gradcheck/adapter-mask1", l, d_z);
    let mask2 = fixed_mask(77, "gradcheck/adapter-mask2", l, d_z);

    grad_check(
        |g, ids| {
            let (h1, h2, gain1, gain2, wz1, wz2, wb1, wb2) =
                (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7]);
            let mut deltas = Vec::new();

            let hn1 = g.rms_norm(h1, gain1)?;
            let z1 = g.matmul_nt(hn1, wz1)?;
            let zu1 = z1;
            let a1 = g.mul_mask(zu1, &mask1)?;
            let zb1 = g.matmul_nt(a1, wb1)?;
            deltas.push(g.slice_cols(zb1, 0, d_h)?);
            deltas.push(g.slice_cols(zb1, d_h, d_h)?);

            let hn2 = g.rms_norm(h2, gain2)?;
            let z2 = g.matmul_nt(hn2, wz2)?;
            let carried = g.scale(zu1, alpha);
            let fresh = g.scale(z2, 1.0 - alpha);
            let zu2 = g.add(carried, fresh)?;
            let a2 = g.mul_mask(zu2, &mask2)?;
            let zb2 = g.matmul_nt(a2, wb2)?;
            deltas.push(g.slice_cols(zb2, 0, d_h)?);
            deltas.push(g.slice_cols(zb2, d_h, d_h)?);

            let mut total: Option<NodeId> = None;
            for d in deltas {
                let sq = g.mul(d, d)?;
                let m = g.mean_all(sq);
                total = Some(match total {
                    Some(t) => g.add(t, m)?,
                    None => m,
                });
            }
            Ok(total.expect("at least one delta"))
        },
        &params,
        DEFAULT_EPSILON,
    )
}

/// Rebuilds the decoder node struct from leaf ids laid out in `named` order.
fn decoder_nodes(cfg: &MaskDecoderConfig, ids: &[NodeId]) -> MaskDecoderNodes {
    let mut it = ids.iter().copied();
    let mut next = || it.next().expect("enough leaf ids");
    let in_proj = next();
    let obj_proj = next();
    let mut stages = Vec::with_capacity(cfg.stages);
    for _ in 0..cfg.stages {
        let kernel = next();
        let pos = next();
        let mut blocks = Vec::with_capacity(cfg.attn_blocks);
        for _ in 0..cfg.attn_blocks {
            let gain = next();
            let wq = next();
            let wk = next();
            let wv = next();
            let wo = next();
            blocks.push(SpatialBlockNodes { gain, wq, wk, wv, wo });
        }
        stages.push(DecoderStageNodes { kernel, pos, blocks });
    }
    let out_proj = next();
    MaskDecoderNodes { in_proj, obj_proj, stages, out_proj }
}

/// Redraws every decoder tensor at a healthy scale so no gradient path is
/// vanishingly small; gains stay near one.
fn energize_decoder(w: &mut MaskDecoderWeights<f64>, seed: u64) {
    let mut rng = stream(seed, "gradcheck/decoder-redraw");
    for (name, t) in w.named_mut() {
        let (mean, std) = if name.contains("gain") { (1.0, 0.1) } else { (0.0, 0.35) };
        let shape = t.shape().to_vec();
        *t = normal_tensor(&mut rng, &shape, mean, std);
    }
}

/// Mask decoder through the soft DICE loss.
pub fn decoder_dice_report() -> CoreResult<GradCheckReport> {
    let d_h = 12;
    let cfg = MaskDecoderConfig { channels: 4, stages: 2, attn_blocks: 1 };
    let mut weights =
        lift(MaskDecoderWeights::<f64>::init(cfg.clone(), d_h, (2, 2), 11))?;
    energize_decoder(&mut weights, 11);

    let mut rng = stream(12, "gradcheck/decoder-inputs");
    let named: Vec<(String, Tensor<f64>)> =
        weights.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let mut params: Vec<(&str, Tensor<f64>)> =
        named.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    let image_hidden = normal_tensor::<f64, _>(&mut rng, &[4, d_h], 0.0, 0.5);
    let object_hidden = normal_tensor::<f64, _>(&mut rng, &[1, d_h], 0.0, 0.5);
    params.push(("image_hidden", image_hidden));
    params.push(("object_hidden", object_hidden));

    let (oh, ow) = weights.out_extent();
    let mut gt = vec![0.0f64; oh * ow];
    for v in gt.iter_mut() {
        if rng.gen_bool(0.4) {
            *v = 1.0;
        }
    }
    let gt = Tensor::new(&[oh * ow, 1], gt).expect("gt shape");

    let n_weights = named.len();
    grad_check(
        |g, ids| {
            let nodes = decoder_nodes(&cfg, &ids[..n_weights]);
            let probs =
                lift(decode_mask(g, &weights, &nodes, ids[n_weights], ids[n_weights + 1]))?;
            lift(soft_dice(g, probs, &gt))
        },
        &params,
        DEFAULT_EPSILON,
    )
}

/// Generation head through the MSE alignment loss.
pub fn gen_head_report() -> CoreResult<GradCheckReport> {
    let (d_c, d_h) = (6usize, 12usize);
    let mut rng = stream(21, "gradcheck/gen-head");
    let params = vec![
        ("w", normal_tensor::<f64, _>(&mut rng, &[d_c, d_h], 0.0, 0.4)),
        ("hidden", normal_tensor(&mut rng, &[1, d_h], 0.0, 0.5)),
    ];
    let target = normal_tensor::<f64, _>(&mut rng, &[1, d_c], 0.0, 0.6);

    grad_check(
        |g, ids| {
            let pred = lift(gen_predict(g, ids[0], ids[1]))?;
            lift(mse_loss(g, pred, &target))
        },
        &params,
        DEFAULT_EPSILON,
    )
}

/// End-to-end: one frozen backbone layer with the adapter infusing Q and V,
/// the combined text + segmentation + generation loss, gradients checked
/// for every tensor the tuning stage trains. The retention ratio is pinned
/// to 1 so the mask is the constant all-ones matrix.
pub fn single_layer_model_report() -> CoreResult<GradCheckReport> {
    let cfg = BackboneConfig { layers: 1, d_h: 16, heads: 2, vocab: 20, max_len: 32 };
    let backbone = lift(BackboneWeights::<f64>::init(cfg.clone(), 5))?;
    let scfg = SparseTaskConfig {
        d_z: 8,
        alpha: 0.9,
        beta: 1.0,
        f: 0.0,
        m: 0.1,
        pattern: Pattern::Gaussian,
        sites: InfusionSites::Qv,
    };
    let dcfg = MaskDecoderConfig { channels: 4, stages: 1, attn_blocks: 1 };
    let mut decoder = lift(MaskDecoderWeights::<f64>::init(dcfg.clone(), cfg.d_h, (2, 2), 31))?;
    energize_decoder(&mut decoder, 31);
    let decoder_named: Vec<(String, Tensor<f64>)> =
        decoder.named().into_iter().map(|(n, t)| (n, t.clone())).collect();

    let mut rng = stream(40, "gradcheck/model-params");
    let mut params: Vec<(&str, Tensor<f64>)> = vec![
        ("adapter_wz", normal_tensor(&mut rng, &[scfg.d_z, cfg.d_h], 0.0, 0.3)),
        ("adapter_wb", normal_tensor(&mut rng, &[2 * cfg.d_h, scfg.d_z], 0.0, 0.3)),
        ("task_rows", normal_tensor(&mut rng, &[9, cfg.d_h], 0.0, 0.3)),
        ("gen_w", normal_tensor(&mut rng, &[4, cfg.d_h], 0.0, 0.3)),
    ];
    for (n, t) in &decoder_named {
        params.push((n.as_str(), t.clone()));
    }

    let patches = normal_tensor::<f64, _>(&mut rng, &[4, cfg.d_h], 0.0, 0.5);
    // [patches][BOS][prompt 12 13][obj-1 14][EOS]; the obj token sits at
    // sequence position 7, EOS at 9.
    let seq = lift(assemble_input(Some(patches), &[12, 13], &[3, 14], cfg.max_len))?;
    let (targets, loss_mask) = shift_targets(&seq);
    let mut gt = vec![0.0f64; 16];
    for v in gt.iter_mut() {
        if rng.gen_bool(0.5) {
            *v = 1.0;
        }
    }
    let gt = Tensor::new(&[16, 1], gt).expect("gt shape");
    let gen_target = normal_tensor::<f64, _>(&mut rng, &[1, 4], 0.0, 0.5);

    grad_check(
        |g, ids| {
            let nodes = backbone.insert(g, false);
            let mut pass = AdapterPass::with_ratio(&scfg, 1.0, stream(0, "gradcheck/unused"));
            let layer_nodes = [(ids[0], ids[1])];
            let hook = AdapterHook { cfg: &scfg, pass: &mut pass, layer_nodes: &layer_nodes };
            let out = lift(forward(g, &cfg, &nodes, &seq, Some(ids[2]), Some(hook)))?;

            let l_txt = g.cross_entropy_next_token(out.logits, &targets, &loss_mask)?;
            let image_hidden = g.gather_rows(out.final_hidden, &[0, 1, 2, 3])?;
            let object_hidden = g.gather_rows(out.final_hidden, &[7])?;
            let dec_nodes = decoder_nodes(&dcfg, &ids[4..]);
            let probs = lift(decode_mask(g, &decoder, &dec_nodes, image_hidden, object_hidden))?;
            let l_seg = lift(soft_dice(g, probs, &gt))?;
            let gen_hidden = g.gather_rows(out.final_hidden, &[9])?;
            let pred = lift(gen_predict(g, ids[3], gen_hidden))?;
            let l_gen = lift(mse_loss(g, pred, &gen_target))?;
            lift(combine_losses(g, Some(l_txt), Some(l_seg), Some(l_gen), 1.0, 10.0))
        },
        &params,
        DEFAULT_EPSILON,
    )
}
