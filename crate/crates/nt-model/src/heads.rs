//! Task heads: a convolutional mask decoder conditioned on object-token
//! hiddens, a linear image-feature regression head for generation, and the
//! joint loss assembly.

use serde::{Deserialize, Serialize};

use nt_core::rng::{normal_tensor, stream};
use nt_core::{Graph, NodeId, Scalar, Tensor};

use crate::error::{contract, Result};

pub const DICE_EPS: f64 = 1.0;
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskDecoderConfig {
    /// Channel width of the decoder.
    pub channels: usize,
    /// Upsampling stages; each doubles the extent.
    pub stages: usize,
    /// Spatial attention blocks after each stage.
    pub attn_blocks: usize,
}

impl Default for MaskDecoderConfig {
    fn default() -> Self {
        MaskDecoderConfig { channels: 12, stages: 3, attn_blocks: 3 }
    }
}

impl MaskDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.stages == 0 {
            return Err(contract("mask_decoder_config", "channels and stages must be positive"));
        }
        Ok(())
    }

    /// Output extent multiplier over the seed grid.
    pub fn upscale(&self) -> usize {
        1 << self.stages
    }
}

#[derive(Clone, Debug)]
pub struct SpatialBlockWeights<F: Scalar> {
    pub gain: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
}

impl<F: Scalar> SpatialBlockWeights<F> {
    fn init(c: usize, seed: u64, name: &str) -> Self {
        let mut rng = stream(seed, name);
        SpatialBlockWeights {
            gain: Tensor::full(&[c], F::one()),
            wq: normal_tensor(&mut rng, &[c, c], 0.0, 0.02),
            wk: normal_tensor(&mut rng, &[c, c], 0.0, 0.02),
            wv: normal_tensor(&mut rng, &[c, c], 0.0, 0.02),
            wo: normal_tensor(&mut rng, &[c, c], 0.0, 0.02),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStageWeights<F: Scalar> {
    /// [c_in, c_out, 3, 3] transposed-conv kernel.
    pub kernel: Tensor<F>,
    /// Learned positions for the upsampled grid, [n x c].
    pub pos: Tensor<F>,
    pub blocks: Vec<SpatialBlockWeights<F>>,
}

/// Decodes a binary mask from the image-patch hiddens, conditioned on one
/// object token hidden. The patch hiddens seed a coarse feature grid; each
/// stage doubles its extent with a stride-2 transposed convolution and mixes
/// it with spatial self-attention.
#[derive(Clone, Debug)]
pub struct MaskDecoderWeights<F: Scalar> {
    pub cfg: MaskDecoderConfig,
    /// Seed grid (rows, cols) of image patches.
    pub grid: (usize, usize),
    /// [c x d_h]
    pub in_proj: Tensor<F>,
    /// [c x d_h]
    pub obj_proj: Tensor<F>,
    pub stages: Vec<DecoderStageWeights<F>>,
    /// [1 x c]
    pub out_proj: Tensor<F>,
}

impl<F: Scalar> MaskDecoderWeights<F> {
    pub fn init(cfg: MaskDecoderConfig, d_h: usize, grid: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut rng = stream(seed, "mask-decoder/proj");
        let in_proj = normal_tensor(&mut rng, &[c, d_h], 0.0, 0.02);
        let obj_proj = normal_tensor(&mut rng, &[c, d_h], 0.0, 0.02);
        let out_proj = normal_tensor(&mut rng, &[1, c], 0.0, 0.02);
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let mut krng = stream(seed, &format!("mask-decoder/stage{s}/kernel"));
            let (h, w) = (grid.0 << (s + 1), grid.1 << (s + 1));
            let mut prng = stream(seed, &format!("mask-decoder/stage{s}/pos"));
            let blocks = (0..cfg.attn_blocks)
                .map(|b| SpatialBlockWeights::init(c, seed, &format!("mask-decoder/stage{s}/block{b}")))
                .collect();
            stages.push(DecoderStageWeights {
                kernel: normal_tensor(&mut krng, &[c, c, 3, 3], 0.0, 0.02),
                pos: normal_tensor(&mut prng, &[h * w, c], 0.0, 0.02),
                blocks,
            });
        }
        Ok(MaskDecoderWeights { cfg, grid, in_proj, obj_proj, stages, out_proj })
    }

    /// Output extent (rows, cols) of decoded masks.
    pub fn out_extent(&self) -> (usize, usize) {
        (self.grid.0 * self.cfg.upscale(), self.grid.1 * self.cfg.upscale())
    }

    pub fn insert(&self, g: &mut Graph<F>, trainable: bool) -> MaskDecoderNodes {
        let mut put = |t: &Tensor<F>| {
            if trainable {
                g.leaf(t.clone(), true)
            } else {
                g.constant(t.clone())
            }
        };
        MaskDecoderNodes {
            in_proj: put(&self.in_proj),
            obj_proj: put(&self.obj_proj),
            stages: self
                .stages
                .iter()
                .map(|s| DecoderStageNodes {
                    kernel: put(&s.kernel),
                    pos: put(&s.pos),
                    blocks: s
                        .blocks
                        .iter()
                        .map(|b| SpatialBlockNodes {
                            gain: put(&b.gain),
                            wq: put(&b.wq),
                            wk: put(&b.wk),
                            wv: put(&b.wv),
                            wo: put(&b.wo),
                        })
                        .collect(),
                })
                .collect(),
            out_proj: put(&self.out_proj),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("heads/mask/in_proj".to_string(), &self.in_proj),
            ("heads/mask/obj_proj".to_string(), &self.obj_proj),
        ];
        for (s, stage) in self.stages.iter().enumerate() {
            out.push((format!("heads/mask/stage{s}/kernel"), &stage.kernel));
            out.push((format!("heads/mask/stage{s}/pos"), &stage.pos));
            for (b, block) in stage.blocks.iter().enumerate() {
                let p = format!("heads/mask/stage{s}/block{b}");
                out.push((format!("{p}/gain"), &block.gain));
                out.push((format!("{p}/wq"), &block.wq));
                out.push((format!("{p}/wk"), &block.wk));
                out.push((format!("{p}/wv"), &block.wv));
                out.push((format!("{p}/wo"), &block.wo));
            }
        }
        out.push(("heads/mask/out_proj".to_string(), &self.out_proj));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("heads/mask/in_proj".to_string(), &mut self.in_proj),
            ("heads/mask/obj_proj".to_string(), &mut self.obj_proj),
        ];
        for (s, stage) in self.stages.iter_mut().enumerate() {
            out.push((format!("heads/mask/stage{s}/kernel"), &mut stage.kernel));
            out.push((format!("heads/mask/stage{s}/pos"), &mut stage.pos));
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                let p = format!("heads/mask/stage{s}/block{b}");
                out.push((format!("{p}/gain"), &mut block.gain));
                out.push((format!("{p}/wq"), &mut block.wq));
                out.push((format!("{p}/wk"), &mut block.wk));
                out.push((format!("{p}/wv"), &mut block.wv));
                out.push((format!("{p}/wo"), &mut block.wo));
            }
        }
        out.push(("heads/mask/out_proj".to_string(), &mut self.out_proj));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct SpatialBlockNodes {
    pub gain: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

#[derive(Clone, Debug)]
pub struct DecoderStageNodes {
    pub kernel: NodeId,
    pub pos: NodeId,
    pub blocks: Vec<SpatialBlockNodes>,
}

#[derive(Clone, Debug)]
pub struct MaskDecoderNodes {
    pub in_proj: NodeId,
    pub obj_proj: NodeId,
    pub stages: Vec<DecoderStageNodes>,
    pub out_proj: NodeId,
}

/// Bidirectional spatial self-attention over grid positions, pre-norm with a
/// residual connection and no FFN.
fn spatial_block<F: Scalar>(
    g: &mut Graph<F>,
    b: &SpatialBlockNodes,
    x: NodeId,
    c: usize,
) -> Result<NodeId> {
    let hn = g.rms_norm(x, b.gain)?;
    let q = g.matmul_nt(hn, b.wq)?;
    let k = g.matmul_nt(hn, b.wk)?;
    let v = g.matmul_nt(hn, b.wv)?;
    let scale = F::from_f64(1.0 / (c as f64).sqrt());
    let scores = g.head_scores(q, k, 1, scale)?;
    let probs = g.softmax_rows(scores)?;
    let mixed = g.head_mix(probs, v, 1)?;
    let out = g.matmul_nt(mixed, b.wo)?;
    g.add(x, out).map_err(Into::into)
}

/// Decodes one object's mask probabilities. `image_hidden` is [n_patches x
/// d_h] in raster order for the seed grid, `object_hidden` [1 x d_h].
/// Returns sigmoid probabilities as [out_h * out_w, 1] in raster order.
pub fn decode_mask<F: Scalar>(
    g: &mut Graph<F>,
    weights: &MaskDecoderWeights<F>,
    nodes: &MaskDecoderNodes,
    image_hidden: NodeId,
    object_hidden: NodeId,
) -> Result<NodeId> {
    let (gh, gw) = weights.grid;
    let c = weights.cfg.channels;
    if g.shape(image_hidden)[0] != gh * gw {
        return Err(contract(
            "decode_mask",
            format!("{} patch hiddens cannot seed a {gh}x{gw} grid", g.shape(image_hidden)[0]),
        ));
    }
    if g.shape(object_hidden) != [1, g.shape(image_hidden)[1]] {
        return Err(contract("decode_mask", "object hidden must be a single row"));
    }
    let seed = g.matmul_nt(image_hidden, nodes.in_proj)?;
    let obj = g.matmul_nt(object_hidden, nodes.obj_proj)?;
    let obj_vec = g.reshape(obj, &[c])?;
    let rows = g.add_row(seed, obj_vec)?;
    // Rows are position-major; the convolution wants channel-major planes.
    let xt = g.transpose(rows)?;
    let mut x = g.reshape(xt, &[c, gh, gw])?;
    let (mut h, mut w) = (gh, gw);
    for stage in &nodes.stages {
        x = g.conv_transpose2d(x, stage.kernel, 2)?;
        h *= 2;
        w *= 2;
        let flat = g.reshape(x, &[c, h * w])?;
        let mut rows = g.transpose(flat)?;
        rows = g.add(rows, stage.pos)?;
        for b in &stage.blocks {
            rows = spatial_block(g, b, rows, c)?;
        }
        let back = g.transpose(rows)?;
        x = g.reshape(back, &[c, h, w])?;
    }
    let flat = g.reshape(x, &[c, h * w])?;
    let rows = g.transpose(flat)?;
    let logits = g.matmul_nt(rows, nodes.out_proj)?;
    Ok(g.sigmoid(logits))
}

/// Soft DICE loss between mask probabilities and a binary ground truth,
/// 1 - (2*intersection + eps) / (sum_p + sum_g + eps).
pub fn soft_dice<F: Scalar>(g: &mut Graph<F>, probs: NodeId, gt: &Tensor<F>) -> Result<NodeId> {
    if g.value(probs).numel() != gt.numel() {
        return Err(contract(
            "soft_dice",
            format!("{} probabilities vs {} ground-truth cells", g.value(probs).numel(), gt.numel()),
        ));
    }
    let flat = g.reshape(probs, &[gt.numel(), 1])?;
    let gt_node = g.constant(gt.reshaped(&[gt.numel(), 1]).expect("gt reshape"));
    let inter = g.mul(flat, gt_node)?;
    let inter_sum = g.sum_all(inter);
    let inter2 = g.scale(inter_sum, F::from_f64(2.0));
    let num = g.add_scalar(inter2, F::from_f64(DICE_EPS));
    let p_sum = g.sum_all(flat);
    let g_sum = g.sum_all(gt_node);
    let den_raw = g.add(p_sum, g_sum)?;
    let den = g.add_scalar(den_raw, F::from_f64(DICE_EPS));
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, F::from_f64(-1.0));
    Ok(g.add_scalar(neg, F::one()))
}

/// Linear regression head mapping a generation-token hidden to the image
/// condition space.
#[derive(Clone, Debug)]
pub struct GenHead<F: Scalar> {
    /// [d_c x d_h]
    pub w: Tensor<F>,
}

impl<F: Scalar> GenHead<F> {
    pub fn init(d_c: usize, d_h: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "gen-head");
        GenHead { w: normal_tensor(&mut rng, &[d_c, d_h], 0.0, 0.02) }
    }

    pub fn insert(&self, g: &mut Graph<F>, trainable: bool) -> NodeId {
        if trainable {
            g.leaf(self.w.clone(), true)
        } else {
            g.constant(self.w.clone())
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.numel()
    }
}

/// Prediction [1 x d_c] from a generation-token hidden [1 x d_h].
pub fn gen_predict<F: Scalar>(g: &mut Graph<F>, w: NodeId, hidden: NodeId) -> Result<NodeId> {
    g.matmul_nt(hidden, w).map_err(Into::into)
}

/// Mean squared error over the feature dimensions.
pub fn mse_loss<F: Scalar>(g: &mut Graph<F>, pred: NodeId, target: &Tensor<F>) -> Result<NodeId> {
    if g.shape(pred) != target.shape() {
        return Err(contract(
            "mse_loss",
            format!("prediction {:?} vs target {:?}", g.shape(pred), target.shape()),
        ));
    }
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// Weighted task loss: l_txt + lambda_seg * l_seg + lambda_gen * l_gen,
/// skipping terms a sample does not carry.
pub fn combine_losses<F: Scalar>(
    g: &mut Graph<F>,
    l_txt: Option<NodeId>,
    l_seg: Option<NodeId>,
    l_gen: Option<NodeId>,
    lambda_seg: f64,
    lambda_gen: f64,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = l_txt;
    if let Some(seg) = l_seg {
        let scaled = g.scale(seg, F::from_f64(lambda_seg));
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    if let Some(gen) = l_gen {
        let scaled = g.scale(gen, F::from_f64(lambda_gen));
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| contract("combine_losses", "no loss terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nt_core::rng::stream;

    fn tiny() -> MaskDecoderWeights<f64> {
        let cfg = MaskDecoderConfig { channels: 4, stages: 3, attn_blocks: 1 };
        MaskDecoderWeights::init(cfg, 8, (2, 2), 5).unwrap()
    }

    #[test]
    fn dice_hand_case() {
        // Two predicted cells at 1.0, two ground-truth cells, one overlaps:
        // 1 - (2*1 + 1) / (2 + 2 + 1) = 0.4.
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(&[4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let gt = Tensor::new(&[4, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = soft_dice(&mut g, p, &gt).unwrap();
        assert!((g.value(loss).data()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn dice_rewards_overlap() {
        let gt = Tensor::new(&[4, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let losses: Vec<f64> = [
            vec![1.0, 1.0, 0.0, 0.0], // perfect
            vec![1.0, 0.5, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0], // disjoint
        ]
        .into_iter()
        .map(|p| {
            let mut g = Graph::new();
            let pn = g.constant(Tensor::new(&[4, 1], p).unwrap());
            let l = soft_dice(&mut g, pn, &gt).unwrap();
            g.value(l).data()[0]
        })
        .collect();
        assert!(losses[0] < 1e-12 + 1.0 - 5.0 / 5.0 + 1e-12);
        assert!(losses.windows(2).all(|w| w[0] < w[1]), "{losses:?}");
        // Empty prediction against empty ground truth is a perfect score.
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(&[2, 1], vec![0.0, 0.0]).unwrap());
        let l = soft_dice(&mut g, p, &Tensor::new(&[2, 1], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn mse_hand_case() {
        // Differences (1, -1) over 2 dims -> mean 1.0.
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap());
        let target = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let loss = mse_loss(&mut g, pred, &target).unwrap();
        assert!((g.value(loss).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_hand_case() {
        let mut g = Graph::<f64>::new();
        let txt = g.constant(Tensor::scalar(1.0));
        let seg = g.constant(Tensor::scalar(0.5));
        let gen = g.constant(Tensor::scalar(0.02));
        let total = combine_losses(&mut g, Some(txt), Some(seg), Some(gen), 1.0, 10.0).unwrap();
        assert!((g.value(total).data()[0] - 1.7).abs() < 1e-12);
        let partial = combine_losses(&mut g, Some(txt), None, Some(gen), 1.0, 10.0).unwrap();
        assert!((g.value(partial).data()[0] - 1.2).abs() < 1e-12);
        assert!(combine_losses::<f64>(&mut g, None, None, None, 1.0, 10.0).is_err());
    }

    #[test]
    fn decoder_upsamples_to_sixteen_by_sixteen() {
        let w = tiny();
        assert_eq!(w.out_extent(), (16, 16));
        let mut g = Graph::<f64>::new();
        let nodes = w.insert(&mut g, false);
        let mut rng = stream(2, "hidden");
        let img = g.constant(nt_core::rng::normal_tensor(&mut rng, &[4, 8], 0.0, 1.0));
        let obj = g.constant(nt_core::rng::normal_tensor(&mut rng, &[1, 8], 0.0, 1.0));
        let probs = decode_mask(&mut g, &w, &nodes, img, obj).unwrap();
        assert_eq!(g.shape(probs), &[256, 1]);
        assert!(g.value(probs).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn decoder_output_depends_on_the_object_token() {
        let w = tiny();
        let mut rng = stream(2, "hidden");
        let img_t = nt_core::rng::normal_tensor::<f64, _>(&mut rng, &[4, 8], 0.0, 1.0);
        let obj_a = nt_core::rng::normal_tensor::<f64, _>(&mut rng, &[1, 8], 0.0, 1.0);
        let obj_b = nt_core::rng::normal_tensor::<f64, _>(&mut rng, &[1, 8], 0.0, 1.0);
        let run = |obj_t: &Tensor<f64>| {
            let mut g = Graph::new();
            let nodes = w.insert(&mut g, false);
            let img = g.constant(img_t.clone());
            let obj = g.constant(obj_t.clone());
            let probs = decode_mask(&mut g, &w, &nodes, img, obj).unwrap();
            g.value(probs).clone()
        };
        assert!(run(&obj_a).max_abs_diff(&run(&obj_b)) > 1e-9);
    }

    #[test]
    fn wrong_seed_grid_is_rejected() {
        let w = tiny();
        let mut g = Graph::<f64>::new();
        let nodes = w.insert(&mut g, false);
        let img = g.constant(Tensor::full(&[5, 8], 0.1));
        let obj = g.constant(Tensor::full(&[1, 8], 0.1));
        assert!(decode_mask(&mut g, &w, &nodes, img, obj).is_err());
    }

    #[test]
    fn gen_head_maps_hidden_to_condition_space() {
        let head = GenHead::<f64>::init(6, 8, 3);
        let mut g = Graph::<f64>::new();
        let w = head.insert(&mut g, true);
        let h = g.constant(Tensor::full(&[1, 8], 0.5));
        let pred = gen_predict(&mut g, w, h).unwrap();
        assert_eq!(g.shape(pred), &[1, 6]);
        // Row value = 0.5 * sum of the weight row.
        let want: f64 = head.w.row(2).iter().sum::<f64>() * 0.5;
        assert!((g.value(pred).get2(0, 2) - want).abs() < 1e-12);
    }
}
