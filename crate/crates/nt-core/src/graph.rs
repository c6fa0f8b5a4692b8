//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Graph` is a per-forward-pass tape: operations evaluate eagerly as they
//! are recorded, and `backward` walks the tape in reverse creation order
//! (which is a valid topological order because every op only references
//! earlier nodes). Graphs are plain owned values, so concurrent forward
//! passes each build their own tape and never share mutable state.

use crate::error::{Result, TensorError};
use crate::kernels::{matmul_nn, matmul_nt, matmul_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RMS_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<F: Scalar> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    AddChannel { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: F },
    AddScalar { a: NodeId },
    Silu { a: NodeId },
    Sigmoid { a: NodeId },
    RmsNorm { a: NodeId, gain: NodeId, inv_rms: Vec<F> },
    SoftmaxRows { a: NodeId },
    CausalSoftmax { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<F> },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    GatherRows { a: NodeId, idx: Vec<usize> },
    SpliceRows { base: NodeId, patch: NodeId, offset: usize },
    ConcatRows { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    SliceCols { a: NodeId, start: usize },
    MulMask { a: NodeId, mask: Tensor<F> },
    HeadScores { q: NodeId, k: NodeId, heads: usize, scale: F },
    HeadMix { probs: NodeId, v: NodeId, heads: usize },
    ConvT2d { x: NodeId, kernel: NodeId, stride: usize },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads[id.0].take()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Inserts a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Inserts a parameter leaf. `trainable` marks whether gradients should
    /// flow to it; frozen weights enter as non-trainable leaves.
    pub fn leaf(&mut self, t: Tensor<F>, trainable: bool) -> NodeId {
        self.push(t, Op::Leaf, trainable)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        self.value(id).dims2().map_err(|_| TensorError::Contract {
            op,
            expected: "rank-2 operand".into(),
            got: format!("shape {:?}", self.shape(id)),
        })
    }

    // ---- binary elementwise ----

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b }, self.needs(a) || self.needs(b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a, b }, self.needs(a) || self.needs(b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b }, self.needs(a) || self.needs(b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let v = self.zip(a, b, |x, y| x / y);
        Ok(self.push(v, Op::Div { a, b }, self.needs(a) || self.needs(b)))
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("zip preserves shape")
    }

    // ---- broadcast bias ----

    /// [m,n] + [n], broadcast over rows. The only row-wise broadcast in the
    /// system; everything else requires exact shapes.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, n) = self.dims2("add_row", a)?;
        if self.shape(row) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let va = self.value(a);
        let vr = self.value(row);
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &r) in chunk.iter_mut().zip(vr.data()) {
                *d += r;
            }
        }
        let v = Tensor::new(va.shape(), data).expect("shape preserved");
        Ok(self.push(v, Op::AddRow { a, row }, self.needs(a) || self.needs(row)))
    }

    /// [c,h,w] + [c], broadcast over the spatial extent of each channel.
    pub fn add_channel(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || self.shape(bias) != [sa[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel",
                left: sa,
                right: self.shape(bias).to_vec(),
            });
        }
        let hw = sa[1] * sa[2];
        let va = self.value(a);
        let vb = self.value(bias);
        let mut data = va.data().to_vec();
        for (c, chunk) in data.chunks_mut(hw).enumerate() {
            let b = vb.data()[c];
            for d in chunk.iter_mut() {
                *d += b;
            }
        }
        let v = Tensor::new(&sa, data).expect("shape preserved");
        Ok(self.push(v, Op::AddChannel { a, bias }, self.needs(a) || self.needs(bias)))
    }

    // ---- scalar-parameterised unary ----

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(v, Op::Scale { a, c }, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let needs = self.needs(a);
        self.push(v, Op::AddScalar { a }, needs)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid_scalar(x));
        let needs = self.needs(a);
        self.push(v, Op::Silu { a }, needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid_scalar);
        let needs = self.needs(a);
        self.push(v, Op::Sigmoid { a }, needs)
    }

    // ---- matrix products ----

    /// C[m,n] = A[m,k] B[k,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, ka, n);
        let v = Tensor::new(&[m, n], data).expect("matmul output shape");
        Ok(self.push(v, Op::MatMul { a, b }, self.needs(a) || self.needs(b)))
    }

    /// C[m,n] = A[m,k] B[n,k]^T. Weight matrices live in [out,in] layout, so
    /// y = x W^T is the canonical linear map.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2("matmul_nt", a)?;
        let (n, kb) = self.dims2("matmul_nt", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = matmul_nt(self.value(a).data(), self.value(b).data(), m, ka, n);
        let v = Tensor::new(&[m, n], data).expect("matmul_nt output shape");
        Ok(self.push(v, Op::MatMulNt { a, b }, self.needs(a) || self.needs(b)))
    }

    // ---- normalisation and attention ----

    /// Row-wise RMS normalisation with a learned gain.
    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2("rms_norm", a)?;
        if self.shape(gain) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                left: self.shape(a).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let eps = F::from_f64(RMS_NORM_EPS);
        let va = self.value(a);
        let vg = self.value(gain);
        let mut data = vec![F::zero(); m * n];
        let mut inv_rms = vec![F::zero(); m];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            let ms = row.iter().map(|&x| x * x).sum::<F>() / F::from_f64(n as f64);
            let inv = (ms + eps).sqrt().recip();
            inv_rms[i] = inv;
            for j in 0..n {
                data[i * n + j] = row[j] * inv * vg.data()[j];
            }
        }
        let v = Tensor::new(&[m, n], data).expect("rms_norm output shape");
        let needs = self.needs(a) || self.needs(gain);
        Ok(self.push(v, Op::RmsNorm { a, gain, inv_rms }, needs))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        let va = self.value(a);
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            softmax_into(row, &mut data[i * n..(i + 1) * n]);
        }
        let v = Tensor::new(&[m, n], data).expect("softmax output shape");
        let needs = self.needs(a);
        Ok(self.push(v, Op::SoftmaxRows { a }, needs))
    }

    /// Softmax over attention scores stacked head-major: row h*L + i holds
    /// the scores of query position i in head h and is normalised over key
    /// positions j <= i. Entries beyond the diagonal stay exactly zero, so
    /// causality never leaks through the normaliser.
    pub fn causal_softmax(&mut self, a: NodeId, heads: usize) -> Result<NodeId> {
        let (rows, l) = self.dims2("causal_softmax", a)?;
        if heads == 0 || rows != heads * l {
            return Err(TensorError::Contract {
                op: "causal_softmax",
                expected: format!("rows = heads * cols with heads = {heads}"),
                got: format!("shape {:?}", self.shape(a)),
            });
        }
        let va = self.value(a);
        let mut data = vec![F::zero(); rows * l];
        for r in 0..rows {
            let i = r % l;
            let row = &va.data()[r * l..r * l + i + 1];
            softmax_into(row, &mut data[r * l..r * l + i + 1]);
        }
        let v = Tensor::new(&[rows, l], data).expect("causal softmax shape");
        let needs = self.needs(a);
        Ok(self.push(v, Op::CausalSoftmax { a }, needs))
    }

    /// Per-head scaled dot products: S[h*Lq + i, j] = scale * <q_i, k_j>
    /// restricted to head h's feature slice.
    pub fn head_scores(&mut self, q: NodeId, k: NodeId, heads: usize, scale: F) -> Result<NodeId> {
        let (lq, d) = self.dims2("head_scores", q)?;
        let (lk, dk) = self.dims2("head_scores", k)?;
        if d != dk || heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract {
                op: "head_scores",
                expected: format!("equal feature dims divisible by heads = {heads}"),
                got: format!("q {:?}, k {:?}", self.shape(q), self.shape(k)),
            });
        }
        let hd = d / heads;
        let vq = self.value(q);
        let vk = self.value(k);
        let mut data = vec![F::zero(); heads * lq * lk];
        for h in 0..heads {
            for i in 0..lq {
                let qrow = &vq.data()[i * d + h * hd..i * d + (h + 1) * hd];
                let out = &mut data[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                for (j, o) in out.iter_mut().enumerate() {
                    let krow = &vk.data()[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut acc = F::zero();
                    for (&a, &b) in qrow.iter().zip(krow) {
                        acc += a * b;
                    }
                    *o = acc * scale;
                }
            }
        }
        let v = Tensor::new(&[heads * lq, lk], data).expect("head_scores shape");
        let needs = self.needs(q) || self.needs(k);
        Ok(self.push(v, Op::HeadScores { q, k, heads, scale }, needs))
    }

    /// Applies attention weights to values per head and re-interleaves the
    /// head slices: O[i, h*hd + c] = sum_j P[h*Lq + i, j] v[j, h*hd + c].
    pub fn head_mix(&mut self, probs: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (rows, lk) = self.dims2("head_mix", probs)?;
        let (lv, d) = self.dims2("head_mix", v)?;
        if lv != lk || heads == 0 || rows % heads != 0 || d % heads != 0 {
            return Err(TensorError::Contract {
                op: "head_mix",
                expected: format!("probs rows divisible by heads = {heads} and matching key count"),
                got: format!("probs {:?}, v {:?}", self.shape(probs), self.shape(v)),
            });
        }
        let lq = rows / heads;
        let hd = d / heads;
        let vp = self.value(probs);
        let vv = self.value(v);
        let mut data = vec![F::zero(); lq * d];
        for h in 0..heads {
            for i in 0..lq {
                let prow = &vp.data()[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                for (j, &p) in prow.iter().enumerate() {
                    if p == F::zero() {
                        continue;
                    }
                    let vrow = &vv.data()[j * d + h * hd..j * d + (h + 1) * hd];
                    let orow = &mut data[i * d + h * hd..i * d + (h + 1) * hd];
                    for (o, &vx) in orow.iter_mut().zip(vrow) {
                        *o += p * vx;
                    }
                }
            }
        }
        let val = Tensor::new(&[lq, d], data).expect("head_mix shape");
        let needs = self.needs(probs) || self.needs(v);
        Ok(self.push(val, Op::HeadMix { probs, v, heads }, needs))
    }

    // ---- losses ----

    /// Masked mean of next-token cross-entropy. `targets[t]` is the token
    /// that position t should predict (callers pre-shift); `mask[t]` marks
    /// the supervised positions. At least one position must be masked.
    pub fn cross_entropy_next_token(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (t, v) = self.dims2("cross_entropy_next_token", logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::Contract {
                op: "cross_entropy_next_token",
                expected: format!("targets and mask of length {t}"),
                got: format!("targets {}, mask {}", targets.len(), mask.len()),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Contract {
                op: "cross_entropy_next_token",
                expected: "at least one masked position".into(),
                got: "all-false mask".into(),
            });
        }
        for (pos, &tgt) in targets.iter().enumerate() {
            if mask[pos] && tgt >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_next_token",
                    index: tgt,
                    extent: v,
                });
            }
        }
        let vl = self.value(logits);
        let mut probs = vec![F::zero(); t * v];
        let mut loss = 0.0f64;
        for i in 0..t {
            let row = &vl.data()[i * v..(i + 1) * v];
            softmax_into(row, &mut probs[i * v..(i + 1) * v]);
            if mask[i] {
                // log prob straight from the stable log-sum-exp, not from the
                // rounded probabilities.
                let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
                let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
                let logp = (row[targets[i]] - max).as_f64() - sum.as_f64().ln();
                loss -= logp;
            }
        }
        loss /= count as f64;
        let value = Tensor::scalar(F::from_f64(loss));
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs },
            needs,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: F = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s: F = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s / F::from_f64(n as f64)), Op::MeanAll { a }, needs)
    }

    // ---- structural ops ----

    /// Selects rows of a rank-2 tensor; indices may repeat (gradient rows
    /// scatter-add back).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims2("gather_rows", a)?;
        for &i in idx {
            if i >= m {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, extent: m });
            }
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&va.data()[i * n..(i + 1) * n]);
        }
        let v = Tensor::new(&[idx.len(), n], data).expect("gather shape");
        let needs = self.needs(a);
        Ok(self.push(v, Op::GatherRows { a, idx: idx.to_vec() }, needs))
    }

    /// Copies `base` and overwrites rows [offset, offset + patch rows) with
    /// `patch`. Used to overlay trainable task-token rows onto the frozen
    /// embedding table.
    pub fn splice_rows(&mut self, base: NodeId, patch: NodeId, offset: usize) -> Result<NodeId> {
        let (m, n) = self.dims2("splice_rows", base)?;
        let (p, np) = self.dims2("splice_rows", patch)?;
        if np != n || offset + p > m {
            return Err(TensorError::Contract {
                op: "splice_rows",
                expected: format!("patch columns = {n} and offset + rows <= {m}"),
                got: format!("patch {:?} at offset {offset}", self.shape(patch)),
            });
        }
        let vb = self.value(base);
        let vp = self.value(patch);
        let mut data = vb.data().to_vec();
        data[offset * n..(offset + p) * n].copy_from_slice(vp.data());
        let v = Tensor::new(&[m, n], data).expect("splice shape");
        let needs = self.needs(base) || self.needs(patch);
        Ok(self.push(v, Op::SpliceRows { base, patch, offset }, needs))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, n) = self.dims2("concat_rows", a)?;
        let (mb, nb) = self.dims2("concat_rows", b)?;
        if n != nb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::new(&[ma + mb, n], data).expect("concat shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::ConcatRows { a, b }, needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2("transpose", a)?;
        let va = self.value(a);
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data()[i * n + j];
            }
        }
        let v = Tensor::new(&[n, m], data).expect("transpose shape");
        let needs = self.needs(a);
        Ok(self.push(v, Op::Transpose { a }, needs))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(v, Op::Reshape { a }, needs))
    }

    /// Contiguous column range [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * n + start..i * n + start + len]);
        }
        let v = Tensor::new(&[m, len], data).expect("slice shape");
        let needs = self.needs(a);
        Ok(self.push(v, Op::SliceCols { a, start }, needs))
    }

    /// Elementwise product with a constant 0/1 mask. The mask is held fixed
    /// during backward, so gradients flow only through retained entries.
    pub fn mul_mask(&mut self, a: NodeId, mask: &Tensor<F>) -> Result<NodeId> {
        if self.shape(a) != mask.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_mask",
                left: self.shape(a).to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let va = self.value(a);
        let data = va.data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect();
        let v = Tensor::new(va.shape(), data).expect("mask shape");
        let needs = self.needs(a);
        Ok(self.push(v, Op::MulMask { a, mask: mask.clone() }, needs))
    }

    /// Transposed 2-D convolution with stride 2 and an odd square kernel.
    /// Padding (k-1)/2 plus one row/column of output padding makes the output
    /// extent exactly double the input extent.
    ///
    /// Input is [c_in, h, w]; the kernel is [c_in, c_out, k, k].
    pub fn conv_transpose2d(&mut self, x: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 4 {
            return Err(TensorError::Contract {
                op: "conv_transpose2d",
                expected: "input rank 3 and kernel rank 4".into(),
                got: format!("input {sx:?}, kernel {sk:?}"),
            });
        }
        if stride != 2 {
            return Err(TensorError::Contract {
                op: "conv_transpose2d",
                expected: "stride 2".into(),
                got: format!("{stride}"),
            });
        }
        if sk[2] != sk[3] || sk[2] % 2 == 0 {
            return Err(TensorError::Contract {
                op: "conv_transpose2d",
                expected: "odd square kernel".into(),
                got: format!("{}x{}", sk[2], sk[3]),
            });
        }
        if sk[0] != sx[0] {
            return Err(TensorError::ShapeMismatch { op: "conv_transpose2d", left: sx, right: sk });
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sk[1], sk[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let pad = (k - 1) / 2;
        let vx = self.value(x);
        let vk = self.value(kernel);
        let mut data = vec![F::zero(); cout * oh * ow];
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = vx.data()[(ci * h + iy) * w + ix];
                    if xv == F::zero() {
                        continue;
                    }
                    for co in 0..cout {
                        let kbase = ((ci * cout + co) * k) * k;
                        for ky in 0..k {
                            let oy = (iy * stride + ky).wrapping_sub(pad);
                            if oy >= oh {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = (ix * stride + kx).wrapping_sub(pad);
                                if ox >= ow {
                                    continue;
                                }
                                data[(co * oh + oy) * ow + ox] += xv * vk.data()[kbase + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[cout, oh, ow], data).expect("conv_transpose2d shape");
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(v, Op::ConvT2d { x, kernel, stride }, needs))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns one gradient per node that
    /// participates in the loss and needs one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.shape(loss) != [1] {
            return Err(TensorError::Contract {
                op: "backward",
                expected: "scalar loss of shape [1]".into(),
                got: format!("shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, delta: Tensor<F>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(t) => {
                for (o, &d) in t.data_mut().iter_mut().zip(delta.data()) {
                    *o += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_node(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("checked at forward");
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let da = matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                    self.accum(grads, *a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let db = matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                    self.accum(grads, *b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("checked at forward");
                let n = self.shape(*b)[0];
                if self.needs(*a) {
                    let da = matmul_nn(g.data(), self.value(*b).data(), m, n, k);
                    self.accum(grads, *a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let db = matmul_tn(g.data(), self.value(*a).data(), m, n, k);
                    self.accum(grads, *b, Tensor::new(&[n, k], db).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let d = elementwise(g, self.value(*b), |x, y| x * y);
                    self.accum(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = elementwise(g, self.value(*a), |x, y| x * y);
                    self.accum(grads, *b, d);
                }
            }
            Op::Div { a, b } => {
                if self.needs(*a) {
                    let d = elementwise(g, self.value(*b), |x, y| x / y);
                    self.accum(grads, *a, d);
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let data: Vec<F> = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    self.accum(grads, *b, Tensor::new(vb.shape(), data).unwrap());
                }
            }
            Op::AddRow { a, row } => {
                self.accum(grads, *a, g.clone());
                if self.needs(*row) {
                    let n = self.shape(*row)[0];
                    let mut d = vec![F::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (o, &gv) in d.iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                    self.accum(grads, *row, Tensor::new(&[n], d).unwrap());
                }
            }
            Op::AddChannel { a, bias } => {
                self.accum(grads, *a, g.clone());
                if self.needs(*bias) {
                    let c = self.shape(*bias)[0];
                    let hw = g.numel() / c;
                    let mut d = vec![F::zero(); c];
                    for (ci, chunk) in g.data().chunks(hw).enumerate() {
                        d[ci] = chunk.iter().copied().sum();
                    }
                    self.accum(grads, *bias, Tensor::new(&[c], d).unwrap());
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accum(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar { a } => {
                self.accum(grads, *a, g.clone());
            }
            Op::Silu { a } => {
                let va = self.value(*a);
                let data: Vec<F> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &x)| {
                        let s = sigmoid_scalar(x);
                        gv * (s + x * s * (F::one() - s))
                    })
                    .collect();
                self.accum(grads, *a, Tensor::new(va.shape(), data).unwrap());
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[id].value;
                let data: Vec<F> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &s)| gv * s * (F::one() - s))
                    .collect();
                self.accum(grads, *a, Tensor::new(y.shape(), data).unwrap());
            }
            Op::RmsNorm { a, gain, inv_rms } => {
                let va = self.value(*a);
                let vg = self.value(*gain);
                let (m, n) = va.dims2().expect("checked at forward");
                if self.needs(*a) {
                    let mut d = vec![F::zero(); m * n];
                    for i in 0..m {
                        let inv = inv_rms[i];
                        let row = &va.data()[i * n..(i + 1) * n];
                        let grow = &g.data()[i * n..(i + 1) * n];
                        let mut s = F::zero();
                        for j in 0..n {
                            s += grow[j] * vg.data()[j] * row[j];
                        }
                        let coef = inv * inv * inv * s / F::from_f64(n as f64);
                        for j in 0..n {
                            d[i * n + j] = grow[j] * vg.data()[j] * inv - row[j] * coef;
                        }
                    }
                    self.accum(grads, *a, Tensor::new(&[m, n], d).unwrap());
                }
                if self.needs(*gain) {
                    let mut d = vec![F::zero(); n];
                    for i in 0..m {
                        let inv = inv_rms[i];
                        for j in 0..n {
                            d[j] += g.data()[i * n + j] * va.data()[i * n + j] * inv;
                        }
                    }
                    self.accum(grads, *gain, Tensor::new(&[n], d).unwrap());
                }
            }
            Op::SoftmaxRows { a } => {
                let y = &self.nodes[id].value;
                let (m, n) = y.dims2().expect("checked at forward");
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    softmax_backward_row(
                        &y.data()[i * n..(i + 1) * n],
                        &g.data()[i * n..(i + 1) * n],
                        &mut d[i * n..(i + 1) * n],
                    );
                }
                self.accum(grads, *a, Tensor::new(&[m, n], d).unwrap());
            }
            Op::CausalSoftmax { a } => {
                let y = &self.nodes[id].value;
                let (rows, l) = y.dims2().expect("checked at forward");
                let mut d = vec![F::zero(); rows * l];
                for r in 0..rows {
                    let i = r % l;
                    softmax_backward_row(
                        &y.data()[r * l..r * l + i + 1],
                        &g.data()[r * l..r * l + i + 1],
                        &mut d[r * l..r * l + i + 1],
                    );
                }
                self.accum(grads, *a, Tensor::new(&[rows, l], d).unwrap());
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let (t, v) = self.value(*logits).dims2().expect("checked at forward");
                let count = mask.iter().filter(|&&m| m).count();
                let gs = g.data()[0] / F::from_f64(count as f64);
                let mut d = vec![F::zero(); t * v];
                for i in 0..t {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        let p = probs[i * v + j];
                        let ind = if j == targets[i] { F::one() } else { F::zero() };
                        d[i * v + j] = gs * (p - ind);
                    }
                }
                self.accum(grads, *logits, Tensor::new(&[t, v], d).unwrap());
            }
            Op::SumAll { a } => {
                let gv = g.data()[0];
                let va = self.value(*a);
                self.accum(grads, *a, Tensor::full(va.shape(), gv));
            }
            Op::MeanAll { a } => {
                let va = self.value(*a);
                let gv = g.data()[0] / F::from_f64(va.numel() as f64);
                self.accum(grads, *a, Tensor::full(va.shape(), gv));
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).dims2().expect("checked at forward");
                    let mut d = vec![F::zero(); m * n];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            d[i * n + j] += g.data()[r * n + j];
                        }
                    }
                    self.accum(grads, *a, Tensor::new(&[m, n], d).unwrap());
                }
            }
            Op::SpliceRows { base, patch, offset } => {
                let (p, n) = self.value(*patch).dims2().expect("checked at forward");
                if self.needs(*base) {
                    let mut d = g.data().to_vec();
                    for x in &mut d[offset * n..(offset + p) * n] {
                        *x = F::zero();
                    }
                    self.accum(grads, *base, Tensor::new(g.shape(), d).unwrap());
                }
                if self.needs(*patch) {
                    let d = g.data()[offset * n..(offset + p) * n].to_vec();
                    self.accum(grads, *patch, Tensor::new(&[p, n], d).unwrap());
                }
            }
            Op::ConcatRows { a, b } => {
                let (ma, n) = self.value(*a).dims2().expect("checked at forward");
                if self.needs(*a) {
                    let d = g.data()[..ma * n].to_vec();
                    self.accum(grads, *a, Tensor::new(&[ma, n], d).unwrap());
                }
                if self.needs(*b) {
                    let mb = self.shape(*b)[0];
                    let d = g.data()[ma * n..].to_vec();
                    self.accum(grads, *b, Tensor::new(&[mb, n], d).unwrap());
                }
            }
            Op::Transpose { a } => {
                let (n, m) = g.dims2().expect("transpose output is rank 2");
                let mut d = vec![F::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        d[j * n + i] = g.data()[i * m + j];
                    }
                }
                self.accum(grads, *a, Tensor::new(&[m, n], d).unwrap());
            }
            Op::Reshape { a } => {
                let d = Tensor::new(self.shape(*a), g.data().to_vec()).unwrap();
                self.accum(grads, *a, d);
            }
            Op::SliceCols { a, start } => {
                let (m, n) = self.value(*a).dims2().expect("sliced input is rank 2");
                let len = g.shape()[1];
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accum(grads, *a, Tensor::new(&[m, n], d).unwrap());
            }
            Op::MulMask { a, mask } => {
                let d = elementwise(g, mask, |x, y| x * y);
                self.accum(grads, *a, d);
            }
            Op::HeadScores { q, k, heads, scale } => {
                let (lq, d) = self.value(*q).dims2().expect("checked at forward");
                let lk = self.shape(*k)[0];
                let hd = d / heads;
                let vq = self.value(*q);
                let vk = self.value(*k);
                if self.needs(*q) {
                    let mut dq = vec![F::zero(); lq * d];
                    for h in 0..*heads {
                        for i in 0..lq {
                            let grow = &g.data()[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                            let qrow = &mut dq[i * d + h * hd..i * d + (h + 1) * hd];
                            for (j, &gv) in grow.iter().enumerate() {
                                if gv == F::zero() {
                                    continue;
                                }
                                let krow = &vk.data()[j * d + h * hd..j * d + (h + 1) * hd];
                                for (o, &kv) in qrow.iter_mut().zip(krow) {
                                    *o += *scale * gv * kv;
                                }
                            }
                        }
                    }
                    self.accum(grads, *q, Tensor::new(&[lq, d], dq).unwrap());
                }
                if self.needs(*k) {
                    let mut dk = vec![F::zero(); lk * d];
                    for h in 0..*heads {
                        for i in 0..lq {
                            let grow = &g.data()[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                            let qrow = &vq.data()[i * d + h * hd..i * d + (h + 1) * hd];
                            for (j, &gv) in grow.iter().enumerate() {
                                if gv == F::zero() {
                                    continue;
                                }
                                let krow = &mut dk[j * d + h * hd..j * d + (h + 1) * hd];
                                for (o, &qv) in krow.iter_mut().zip(qrow) {
                                    *o += *scale * gv * qv;
                                }
                            }
                        }
                    }
                    self.accum(grads, *k, Tensor::new(&[lk, d], dk).unwrap());
                }
            }
            Op::HeadMix { probs, v, heads } => {
                let (rows, lk) = self.value(*probs).dims2().expect("checked at forward");
                let lq = rows / heads;
                let d = self.shape(*v)[1];
                let hd = d / heads;
                let vp = self.value(*probs);
                let vv = self.value(*v);
                if self.needs(*probs) {
                    let mut dp = vec![F::zero(); rows * lk];
                    for h in 0..*heads {
                        for i in 0..lq {
                            let grow = &g.data()[i * d + h * hd..i * d + (h + 1) * hd];
                            let out = &mut dp[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                            for (j, o) in out.iter_mut().enumerate() {
                                let vrow = &vv.data()[j * d + h * hd..j * d + (h + 1) * hd];
                                let mut acc = F::zero();
                                for (&gv, &vx) in grow.iter().zip(vrow) {
                                    acc += gv * vx;
                                }
                                *o = acc;
                            }
                        }
                    }
                    self.accum(grads, *probs, Tensor::new(&[rows, lk], dp).unwrap());
                }
                if self.needs(*v) {
                    let mut dv = vec![F::zero(); lk * d];
                    for h in 0..*heads {
                        for i in 0..lq {
                            let prow = &vp.data()[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                            let grow = &g.data()[i * d + h * hd..i * d + (h + 1) * hd];
                            for (j, &p) in prow.iter().enumerate() {
                                if p == F::zero() {
                                    continue;
                                }
                                let vrow = &mut dv[j * d + h * hd..j * d + (h + 1) * hd];
                                for (o, &gv) in vrow.iter_mut().zip(grow) {
                                    *o += p * gv;
                                }
                            }
                        }
                    }
                    self.accum(grads, *v, Tensor::new(&[lk, d], dv).unwrap());
                }
            }
            Op::ConvT2d { x, kernel, stride } => {
                let sx = self.shape(*x).to_vec();
                let sk = self.shape(*kernel).to_vec();
                let (cin, h, w) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sk[1], sk[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let pad = (k - 1) / 2;
                let vx = self.value(*x);
                let vk = self.value(*kernel);
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); cin * h * w];
                    for ci in 0..cin {
                        for iy in 0..h {
                            for ix in 0..w {
                                let mut acc = F::zero();
                                for co in 0..cout {
                                    let kbase = ((ci * cout + co) * k) * k;
                                    for ky in 0..k {
                                        let oy = (iy * stride + ky).wrapping_sub(pad);
                                        if oy >= oh {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ox = (ix * stride + kx).wrapping_sub(pad);
                                            if ox >= ow {
                                                continue;
                                            }
                                            acc += g.data()[(co * oh + oy) * ow + ox]
                                                * vk.data()[kbase + ky * k + kx];
                                        }
                                    }
                                }
                                dx[(ci * h + iy) * w + ix] = acc;
                            }
                        }
                    }
                    self.accum(grads, *x, Tensor::new(&[cin, h, w], dx).unwrap());
                }
                if self.needs(*kernel) {
                    let mut dk = vec![F::zero(); cin * cout * k * k];
                    for ci in 0..cin {
                        for iy in 0..h {
                            for ix in 0..w {
                                let xv = vx.data()[(ci * h + iy) * w + ix];
                                if xv == F::zero() {
                                    continue;
                                }
                                for co in 0..cout {
                                    let kbase = ((ci * cout + co) * k) * k;
                                    for ky in 0..k {
                                        let oy = (iy * stride + ky).wrapping_sub(pad);
                                        if oy >= oh {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ox = (ix * stride + kx).wrapping_sub(pad);
                                            if ox >= ow {
                                                continue;
                                            }
                                            dk[kbase + ky * k + kx] +=
                                                xv * g.data()[(co * oh + oy) * ow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accum(grads, *kernel, Tensor::new(&sk, dk).unwrap());
                }
            }
        }
    }
}

#[inline]
fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    // Split on sign so the exp never overflows.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_into<F: Scalar>(row: &[F], out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn softmax_backward_row<F: Scalar>(y: &[F], g: &[F], out: &mut [F]) {
    let mut dot = F::zero();
    for (&yv, &gv) in y.iter().zip(g) {
        dot += yv * gv;
    }
    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - dot);
    }
}

fn elementwise<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("elementwise preserves shape")
}

/// Index of the largest entry, lower index on ties.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
