//! Wengert tape: eager forward evaluation with recorded nodes, reverse-mode
//! backward. One tape per forward pass; parameters enter as leaves and get
//! their gradients out of [`Gradients`] after `backward`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{NumericsError, Tensor};
use crate::math;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) u32);

impl VarId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Recorded primitive. Saved state lives in [`Saved`].
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Matmul,
    Add,
    AddBias,
    Mul,
    Scale(f32),
    Gelu,
    Softmax { axis: usize },
    LayerNorm { eps: f32 },
    MseLoss,
    Attention { batch: usize, seq: usize, heads: usize, head_dim: usize },
    PrefixCols { keep: usize },
    PrefixRows { keep: usize },
    TileRows { reps: usize },
    SeqMean { seq: usize },
    /// Simulated quantization with straight-through gradient. In surrogate
    /// mode the forward passes values through unchanged inside the clip mask
    /// (clamping outside), which makes the loss finite-differentiable while
    /// keeping the exact STE backward.
    FakeQuant { per_channel: bool, surrogate: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::AddBias => "add_bias",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Gelu => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MseLoss => "mse_loss",
            Op::Attention { .. } => "attention",
            Op::PrefixCols { .. } => "prefix_cols",
            Op::PrefixRows { .. } => "prefix_rows",
            Op::TileRows { .. } => "tile_rows",
            Op::SeqMean { .. } => "seq_mean",
            Op::FakeQuant { .. } => "fake_quant",
        }
    }
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    /// Per-row 1/sqrt(var + eps) for layer_norm.
    InvStd(Vec<f64>),
    /// Attention probabilities, laid out [batch, heads, seq, seq].
    Probs(Vec<f32>),
    /// STE pass-through mask.
    QuantMask { mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<VarId>,
    value: Tensor,
    saved: Saved,
}

/// Ordered record of primitive applications. Backward traverses in exact
/// reverse application order; gradient accumulation is additive.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Quantize one value to the signed grid `[-qmax-1, qmax] * scale`,
/// rounding half to even. Returns the quantized value and whether the
/// pre-clamp level was in range (the STE mask).
pub fn quantize_value(x: f32, scale: f32, qmax: i32) -> (f32, bool) {
    let s = scale as f64;
    let q = math::round_ties_even(x as f64 / s);
    let lo = -(qmax as f64) - 1.0;
    let hi = qmax as f64;
    let in_range = q >= lo && q <= hi;
    ((q.clamp(lo, hi) * s) as f32, in_range)
}

/// Surrogate used by the end-to-end gradient check: identity inside the clip
/// mask, clamped to the grid boundary outside.
pub fn surrogate_value(x: f32, scale: f32, qmax: i32) -> (f32, bool) {
    let (_, in_range) = quantize_value(x, scale, qmax);
    if in_range {
        (x, true)
    } else {
        let s = scale as f64;
        let bound = if (x as f64) < 0.0 { (-(qmax as f64) - 1.0) * s } else { qmax as f64 * s };
        (bound as f32, false)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    fn check(&self, id: VarId, op: &'static str) -> Result<(), NumericsError> {
        if id.idx() >= self.nodes.len() {
            return Err(NumericsError::UnknownVar { index: id.idx() });
        }
        let _ = op;
        Ok(())
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<VarId>,
        value: Tensor,
        saved: Saved,
    ) -> Result<VarId, NumericsError> {
        value.check_finite(op.name())?;
        let id = VarId(self.nodes.len() as u32);
        self.nodes.push(Node { op, inputs, value, saved });
        Ok(id)
    }

    /// Import a tensor as a leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Result<VarId, NumericsError> {
        self.push(Op::Leaf, Vec::new(), value, Saved::None)
    }

    // ---- forward primitives ------------------------------------------------

    /// `[n,k] x [k,m] -> [n,m]`, f64 accumulation.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0f32; n * m];
        mm_nn(ta.data(), tb.data(), n, k, m, &mut out);
        self.push(Op::Matmul, vec![a, b], Tensor::from_parts(vec![n, m], out), Saved::None)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Add, vec![a, b], Tensor::from_parts(shape, data), Saved::None)
    }

    /// Broadcast a 1-D bias over the last axis: `[n,m] + [m]`.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId, NumericsError> {
        self.check(x, "add_bias")?;
        self.check(bias, "add_bias")?;
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape().len() != 1 || tx.cols() != tb.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", tx.shape(), tb.shape()),
            });
        }
        let m = tb.numel();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % m])
            .collect();
        let shape = tx.shape().to_vec();
        self.push(Op::AddBias, vec![x, bias], Tensor::from_parts(shape, data), Saved::None)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.check(a, "mul")?;
        self.check(b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Mul, vec![a, b], Tensor::from_parts(shape, data), Saved::None)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: VarId, c: f32) -> Result<VarId, NumericsError> {
        self.check(x, "scale")?;
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let shape = tx.shape().to_vec();
        self.push(Op::Scale(c), vec![x], Tensor::from_parts(shape, data), Saved::None)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: VarId) -> Result<VarId, NumericsError> {
        self.check(x, "gelu")?;
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_fwd(v as f64) as f32).collect();
        let shape = tx.shape().to_vec();
        self.push(Op::Gelu, vec![x], Tensor::from_parts(shape, data), Saved::None)
    }

    /// Softmax along `axis`; lines sum to 1.
    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId, NumericsError> {
        self.check(x, "softmax")?;
        let tx = self.value(x);
        if axis >= tx.shape().len() {
            return Err(NumericsError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} of {:?}", tx.shape()),
            });
        }
        let shape = tx.shape().to_vec();
        let mut data = tx.data().to_vec();
        let mut tmp = vec![0.0f64; shape[axis]];
        for_each_line(&shape, axis, |base, stride, len| {
            softmax_line(&mut data, &mut tmp, base, stride, len);
        });
        self.push(Op::Softmax { axis }, vec![x], Tensor::from_parts(shape, data), Saved::None)
    }

    /// Normalize the last axis to zero mean / unit variance (no affine).
    pub fn layer_norm(&mut self, x: VarId, eps: f32) -> Result<VarId, NumericsError> {
        self.check(x, "layer_norm")?;
        if eps <= 0.0 {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let tx = self.value(x);
        let m = tx.cols();
        let n = tx.numel() / m;
        let mut data = vec![0.0f32; tx.numel()];
        let mut inv_std = vec![0.0f64; n];
        for i in 0..n {
            let row = &tx.data()[i * m..(i + 1) * m];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>()
                / m as f64;
            let is = 1.0 / math::sqrt(var + eps as f64);
            inv_std[i] = is;
            for j in 0..m {
                data[i * m + j] = ((row[j] as f64 - mean) * is) as f32;
            }
        }
        let shape = tx.shape().to_vec();
        self.push(
            Op::LayerNorm { eps },
            vec![x],
            Tensor::from_parts(shape, data),
            Saved::InvStd(inv_std),
        )
    }

    /// Squared-error loss: sum over the last axis, mean over rows.
    pub fn mse_loss(&mut self, pred: VarId, target: VarId) -> Result<VarId, NumericsError> {
        self.check(pred, "mse_loss")?;
        self.check(target, "mse_loss")?;
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mse_loss",
                detail: format!("{:?} vs {:?}", tp.shape(), tt.shape()),
            });
        }
        let rows = tp.rows() as f64;
        let sum: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| {
                let d = p as f64 - t as f64;
                d * d
            })
            .sum();
        let loss = (sum / rows) as f32;
        self.push(
            Op::MseLoss,
            vec![pred, target],
            Tensor::from_parts(vec![1], vec![loss]),
            Saved::None,
        )
    }

    /// Batched multi-head self-attention. `q`, `k`, `v` are
    /// `[batch*seq, heads*head_dim]`; scores are scaled by 1/sqrt(head_dim).
    pub fn attention(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<VarId, NumericsError> {
        self.check(q, "attention")?;
        self.check(k, "attention")?;
        self.check(v, "attention")?;
        let want = [batch * seq, heads * head_dim];
        for id in [q, k, v] {
            if self.value(id).shape() != want {
                return Err(NumericsError::ShapeMismatch {
                    op: "attention",
                    detail: format!("{:?}, expected {:?}", self.value(id).shape(), want),
                });
            }
        }
        let width = heads * head_dim;
        let scale = 1.0 / math::sqrt(head_dim as f64);
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0f32; batch * seq * width];
        let mut probs = vec![0.0f32; batch * heads * seq * seq];
        let mut scores = vec![0.0f64; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let col0 = h * head_dim;
                for s1 in 0..seq {
                    let qrow = &tq[(b * seq + s1) * width + col0..][..head_dim];
                    for s2 in 0..seq {
                        let krow = &tk[(b * seq + s2) * width + col0..][..head_dim];
                        let dot: f64 = qrow
                            .iter()
                            .zip(krow)
                            .map(|(&x, &y)| x as f64 * y as f64)
                            .sum();
                        scores[s1 * seq + s2] = dot * scale;
                    }
                }
                // row-wise softmax in f64
                let pbase = (b * heads + h) * seq * seq;
                for s1 in 0..seq {
                    let row = &mut scores[s1 * seq..(s1 + 1) * seq];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for val in row.iter_mut() {
                        *val = math::exp(*val - max);
                        sum += *val;
                    }
                    for (s2, val) in row.iter().enumerate() {
                        probs[pbase + s1 * seq + s2] = (val / sum) as f32;
                    }
                }
                for s1 in 0..seq {
                    for d in 0..head_dim {
                        let mut acc = 0.0f64;
                        for s2 in 0..seq {
                            acc += probs[pbase + s1 * seq + s2] as f64
                                * tv[(b * seq + s2) * width + col0 + d] as f64;
                        }
                        out[(b * seq + s1) * width + col0 + d] = acc as f32;
                    }
                }
            }
        }
        self.push(
            Op::Attention { batch, seq, heads, head_dim },
            vec![q, k, v],
            Tensor::from_parts(vec![batch * seq, width], out),
            Saved::Probs(probs),
        )
    }

    /// Keep the first `keep` columns of a 2-D tensor.
    pub fn prefix_cols(&mut self, x: VarId, keep: usize) -> Result<VarId, NumericsError> {
        self.check(x, "prefix_cols")?;
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if tx.shape().len() != 2 || keep == 0 || keep > m {
            return Err(NumericsError::ShapeMismatch {
                op: "prefix_cols",
                detail: format!("keep {keep} of {:?}", tx.shape()),
            });
        }
        if keep == m {
            return Ok(x);
        }
        let mut data = Vec::with_capacity(n * keep);
        for i in 0..n {
            data.extend_from_slice(&tx.data()[i * m..i * m + keep]);
        }
        self.push(
            Op::PrefixCols { keep },
            vec![x],
            Tensor::from_parts(vec![n, keep], data),
            Saved::None,
        )
    }

    /// Keep the first `keep` rows of a 2-D tensor.
    pub fn prefix_rows(&mut self, x: VarId, keep: usize) -> Result<VarId, NumericsError> {
        self.check(x, "prefix_rows")?;
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if tx.shape().len() != 2 || keep == 0 || keep > n {
            return Err(NumericsError::ShapeMismatch {
                op: "prefix_rows",
                detail: format!("keep {keep} of {:?}", tx.shape()),
            });
        }
        if keep == n {
            return Ok(x);
        }
        let data = tx.data()[..keep * m].to_vec();
        self.push(
            Op::PrefixRows { keep },
            vec![x],
            Tensor::from_parts(vec![keep, m], data),
            Saved::None,
        )
    }

    /// Stack `reps` copies of a 2-D tensor along rows: `[s,d] -> [reps*s,d]`.
    pub fn tile_rows(&mut self, x: VarId, reps: usize) -> Result<VarId, NumericsError> {
        self.check(x, "tile_rows")?;
        let tx = self.value(x);
        if tx.shape().len() != 2 || reps == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "tile_rows",
                detail: format!("reps {reps} of {:?}", tx.shape()),
            });
        }
        let (s, d) = (tx.shape()[0], tx.shape()[1]);
        let mut data = Vec::with_capacity(reps * s * d);
        for _ in 0..reps {
            data.extend_from_slice(tx.data());
        }
        self.push(
            Op::TileRows { reps },
            vec![x],
            Tensor::from_parts(vec![reps * s, d], data),
            Saved::None,
        )
    }

    /// Mean over consecutive row groups of size `seq`: `[b*seq,d] -> [b,d]`.
    pub fn seq_mean(&mut self, x: VarId, seq: usize) -> Result<VarId, NumericsError> {
        self.check(x, "seq_mean")?;
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        if tx.shape().len() != 2 || seq == 0 || n % seq != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "seq_mean",
                detail: format!("seq {seq} of {:?}", tx.shape()),
            });
        }
        let b = n / seq;
        let mut data = vec![0.0f32; b * d];
        for bi in 0..b {
            for j in 0..d {
                let mut acc = 0.0f64;
                for s in 0..seq {
                    acc += tx.data()[(bi * seq + s) * d + j] as f64;
                }
                data[bi * d + j] = (acc / seq as f64) as f32;
            }
        }
        self.push(
            Op::SeqMean { seq },
            vec![x],
            Tensor::from_parts(vec![b, d], data),
            Saved::None,
        )
    }

    /// Per-tensor fake quantization with STE gradient. `qmax` is
    /// `2^(bits-1) - 1`; callers pass bits=16 through [`Tape::identity`]
    /// instead (16-bit specs are exact identities).
    pub fn fake_quant_per_tensor(
        &mut self,
        x: VarId,
        scale: f32,
        qmax: i32,
        surrogate: bool,
    ) -> Result<VarId, NumericsError> {
        self.check(x, "fake_quant")?;
        let tx = self.value(x);
        let n = tx.numel();
        let mut data = vec![0.0f32; n];
        let mut mask = vec![false; n];
        for (i, &v) in tx.data().iter().enumerate() {
            let (y, in_range) =
                if surrogate { surrogate_value(v, scale, qmax) } else { quantize_value(v, scale, qmax) };
            data[i] = y;
            mask[i] = in_range;
        }
        let shape = tx.shape().to_vec();
        self.push(
            Op::FakeQuant { per_channel: false, surrogate },
            vec![x],
            Tensor::from_parts(shape, data),
            Saved::QuantMask { mask },
        )
    }

    /// Per-output-channel fake quantization of a 2-D weight `[in, out]`;
    /// `scales` has one entry per column.
    pub fn fake_quant_per_channel(
        &mut self,
        x: VarId,
        scales: &[f32],
        qmax: i32,
        surrogate: bool,
    ) -> Result<VarId, NumericsError> {
        self.check(x, "fake_quant")?;
        let tx = self.value(x);
        if tx.shape().len() != 2 || tx.cols() != scales.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "fake_quant",
                detail: format!("{} scales for {:?}", scales.len(), tx.shape()),
            });
        }
        let m = tx.cols();
        let n = tx.numel();
        let mut data = vec![0.0f32; n];
        let mut mask = vec![false; n];
        for (i, &v) in tx.data().iter().enumerate() {
            let s = scales[i % m];
            let (y, in_range) =
                if surrogate { surrogate_value(v, s, qmax) } else { quantize_value(v, s, qmax) };
            data[i] = y;
            mask[i] = in_range;
        }
        let shape = tx.shape().to_vec();
        self.push(
            Op::FakeQuant { per_channel: true, surrogate },
            vec![x],
            Tensor::from_parts(shape, data),
            Saved::QuantMask { mask },
        )
    }

    /// Explicit identity (16-bit pass-through), kept for call-site symmetry.
    pub fn identity(&self, x: VarId) -> VarId {
        x
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// node; leaves not reachable from the loss get zeros.
    pub fn backward(&self, loss: VarId) -> Result<Gradients, NumericsError> {
        self.check(loss, "backward")?;
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumericsError::NonScalarLoss { numel: lt.numel() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx()] = Some(Tensor::from_parts(vec![1], vec![1.0]));

        for idx in (0..=loss.idx()).rev() {
            let gout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // keep the gradient available for queries after the sweep
            let node = &self.nodes[idx];
            let input_grads = self.backward_node(node, &gout)?;
            grads[idx] = Some(gout);
            for (vid, g) in node.inputs.iter().zip(input_grads) {
                accumulate(&mut grads[vid.idx()], g);
            }
        }

        // unused leaves get explicit zeros
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, gout: &Tensor) -> Result<Vec<Tensor>, NumericsError> {
        let val = |i: usize| self.value(node.inputs[i]);
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul => {
                let (a, b) = (val(0), val(1));
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                // dA = dC * B^T ; dB = A^T * dC
                let mut da = vec![0.0f32; n * k];
                mm_nt(gout.data(), b.data(), n, m, k, &mut da);
                let mut db = vec![0.0f32; k * m];
                mm_tn(a.data(), gout.data(), n, k, m, &mut db);
                vec![
                    Tensor::from_parts(vec![n, k], da),
                    Tensor::from_parts(vec![k, m], db),
                ]
            }
            Op::Add => vec![gout.clone(), gout.clone()],
            Op::AddBias => {
                let m = val(1).numel();
                let mut db = vec![0.0f64; m];
                for (i, &g) in gout.data().iter().enumerate() {
                    db[i % m] += g as f64;
                }
                vec![
                    gout.clone(),
                    Tensor::from_parts(vec![m], db.iter().map(|&v| v as f32).collect()),
                ]
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                let da = gout.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let db = gout.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
                vec![
                    Tensor::from_parts(a.shape().to_vec(), da),
                    Tensor::from_parts(b.shape().to_vec(), db),
                ]
            }
            Op::Scale(c) => {
                let dx = gout.data().iter().map(|g| g * c).collect();
                vec![Tensor::from_parts(gout.shape().to_vec(), dx)]
            }
            Op::Gelu => {
                let x = val(0);
                let dx = x
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&v, &g)| (gelu_bwd(v as f64) * g as f64) as f32)
                    .collect();
                vec![Tensor::from_parts(x.shape().to_vec(), dx)]
            }
            Op::Softmax { axis } => {
                let y = &node.value;
                let mut dx = gout.data().to_vec();
                let ydata = y.data();
                for_each_line(y.shape(), *axis, |base, stride, len| {
                    let mut dot = 0.0f64;
                    for j in 0..len {
                        let p = base + j * stride;
                        dot += dx[p] as f64 * ydata[p] as f64;
                    }
                    for j in 0..len {
                        let p = base + j * stride;
                        dx[p] = ((dx[p] as f64 - dot) * ydata[p] as f64) as f32;
                    }
                });
                vec![Tensor::from_parts(y.shape().to_vec(), dx)]
            }
            Op::LayerNorm { .. } => {
                let y = &node.value;
                let inv_std = match &node.saved {
                    Saved::InvStd(v) => v,
                    _ => unreachable!("layer_norm saves inv_std"),
                };
                let m = y.cols();
                let n = y.numel() / m;
                let mut dx = vec![0.0f32; y.numel()];
                for i in 0..n {
                    let yrow = &y.data()[i * m..(i + 1) * m];
                    let grow = &gout.data()[i * m..(i + 1) * m];
                    let mean_g: f64 =
                        grow.iter().map(|&g| g as f64).sum::<f64>() / m as f64;
                    let mean_gy: f64 = grow
                        .iter()
                        .zip(yrow)
                        .map(|(&g, &yv)| g as f64 * yv as f64)
                        .sum::<f64>()
                        / m as f64;
                    for j in 0..m {
                        dx[i * m + j] = (inv_std[i]
                            * (grow[j] as f64 - mean_g - yrow[j] as f64 * mean_gy))
                            as f32;
                    }
                }
                vec![Tensor::from_parts(y.shape().to_vec(), dx)]
            }
            Op::MseLoss => {
                let (p, t) = (val(0), val(1));
                let g = gout.item() as f64;
                let rows = p.rows() as f64;
                let c = 2.0 * g / rows;
                let dp: Vec<f32> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&pv, &tv)| (c * (pv as f64 - tv as f64)) as f32)
                    .collect();
                let dt = dp.iter().map(|v| -v).collect();
                vec![
                    Tensor::from_parts(p.shape().to_vec(), dp),
                    Tensor::from_parts(t.shape().to_vec(), dt),
                ]
            }
            Op::Attention { batch, seq, heads, head_dim } => {
                let probs = match &node.saved {
                    Saved::Probs(p) => p,
                    _ => unreachable!("attention saves probabilities"),
                };
                attention_backward(
                    val(0).data(),
                    val(1).data(),
                    val(2).data(),
                    probs,
                    gout.data(),
                    *batch,
                    *seq,
                    *heads,
                    *head_dim,
                )
            }
            Op::PrefixCols { keep } => {
                let x = val(0);
                let (n, m) = (x.rows(), x.cols());
                let mut dx = vec![0.0f32; n * m];
                for i in 0..n {
                    dx[i * m..i * m + keep]
                        .copy_from_slice(&gout.data()[i * keep..(i + 1) * keep]);
                }
                vec![Tensor::from_parts(vec![n, m], dx)]
            }
            Op::PrefixRows { keep } => {
                let x = val(0);
                let (n, m) = (x.rows(), x.cols());
                let mut dx = vec![0.0f32; n * m];
                dx[..keep * m].copy_from_slice(gout.data());
                vec![Tensor::from_parts(vec![n, m], dx)]
            }
            Op::TileRows { reps } => {
                let x = val(0);
                let sz = x.numel();
                let mut dx = vec![0.0f64; sz];
                for r in 0..*reps {
                    for (i, dv) in dx.iter_mut().enumerate() {
                        *dv += gout.data()[r * sz + i] as f64;
                    }
                }
                vec![Tensor::from_parts(
                    x.shape().to_vec(),
                    dx.iter().map(|&v| v as f32).collect(),
                )]
            }
            Op::SeqMean { seq } => {
                let x = val(0);
                let d = x.cols();
                let inv = 1.0 / *seq as f32;
                let mut dx = vec![0.0f32; x.numel()];
                for (bi, chunk) in gout.data().chunks(d).enumerate() {
                    for s in 0..*seq {
                        for j in 0..d {
                            dx[(bi * seq + s) * d + j] = chunk[j] * inv;
                        }
                    }
                }
                vec![Tensor::from_parts(x.shape().to_vec(), dx)]
            }
            Op::FakeQuant { .. } => {
                let mask = match &node.saved {
                    Saved::QuantMask { mask } => mask,
                    _ => unreachable!("fake_quant saves its mask"),
                };
                let dx = gout
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { g } else { 0.0 })
                    .collect();
                vec![Tensor::from_parts(gout.shape().to_vec(), dx)]
            }
        };
        Ok(out)
    }
}

/// Gradients from one backward sweep, indexed by [`VarId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`. Leaves always have one.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.idx()).and_then(|g| g.as_ref())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

// ---- kernels ---------------------------------------------------------------

/// C[n,m] = A[n,k] * B[k,m], f64 accumulation.
fn mm_nn(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (l, &ail) in arow.iter().enumerate() {
            let ail = ail as f64;
            let brow = &b[l * m..(l + 1) * m];
            for (av, &blj) in acc.iter_mut().zip(brow) {
                *av += ail * blj as f64;
            }
        }
        for (o, &v) in out[i * m..(i + 1) * m].iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
}

/// C[n,m] = A[n,k] * B[m,k]^T (rows of B dotted with rows of A).
fn mm_nt(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(&x, &y)| x as f64 * y as f64).sum();
            out[i * m + j] = dot as f32;
        }
    }
}

/// C[k,m] = A[n,k]^T * B[n,m], f64 accumulation.
fn mm_tn(a: &[f32], b: &[f32], n: usize, k: usize, m: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (l, &ail) in arow.iter().enumerate() {
            let ail = ail as f64;
            let dst = &mut acc[l * m..(l + 1) * m];
            for (av, &bij) in dst.iter_mut().zip(brow) {
                *av += ail * bij as f64;
            }
        }
    }
    for (o, &v) in out.iter_mut().zip(acc.iter()) {
        *o = v as f32;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = math::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Iterate lines of `shape` along `axis`, yielding (base, stride, len).
fn for_each_line(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

fn softmax_line(data: &mut [f32], tmp: &mut [f64], base: usize, stride: usize, len: usize) {
    let mut max = f64::NEG_INFINITY;
    for j in 0..len {
        max = max.max(data[base + j * stride] as f64);
    }
    let mut sum = 0.0f64;
    for j in 0..len {
        let e = math::exp(data[base + j * stride] as f64 - max);
        tmp[j] = e;
        sum += e;
    }
    for j in 0..len {
        data[base + j * stride] = (tmp[j] / sum) as f32;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    gout: &[f32],
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
) -> Vec<Tensor> {
    let width = heads * head_dim;
    let scale = 1.0 / math::sqrt(head_dim as f64);
    let mut dq = vec![0.0f32; batch * seq * width];
    let mut dk = vec![0.0f32; batch * seq * width];
    let mut dv = vec![0.0f32; batch * seq * width];
    let mut dp = vec![0.0f64; seq * seq];
    let mut ds = vec![0.0f64; seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let col0 = h * head_dim;
            let pbase = (b * heads + h) * seq * seq;
            // dV and dP
            for s2 in 0..seq {
                for d in 0..head_dim {
                    let mut acc = 0.0f64;
                    for s1 in 0..seq {
                        acc += probs[pbase + s1 * seq + s2] as f64
                            * gout[(b * seq + s1) * width + col0 + d] as f64;
                    }
                    dv[(b * seq + s2) * width + col0 + d] = acc as f32;
                }
            }
            for s1 in 0..seq {
                for s2 in 0..seq {
                    let mut acc = 0.0f64;
                    for d in 0..head_dim {
                        acc += gout[(b * seq + s1) * width + col0 + d] as f64
                            * v[(b * seq + s2) * width + col0 + d] as f64;
                    }
                    dp[s1 * seq + s2] = acc;
                }
            }
            // softmax backward per row
            for s1 in 0..seq {
                let mut dot = 0.0f64;
                for s2 in 0..seq {
                    dot += dp[s1 * seq + s2] * probs[pbase + s1 * seq + s2] as f64;
                }
                for s2 in 0..seq {
                    ds[s1 * seq + s2] =
                        (dp[s1 * seq + s2] - dot) * probs[pbase + s1 * seq + s2] as f64;
                }
            }
            // dQ = dS * K * scale ; dK = dS^T * Q * scale
            for s1 in 0..seq {
                for d in 0..head_dim {
                    let mut acc = 0.0f64;
                    for s2 in 0..seq {
                        acc += ds[s1 * seq + s2] * k[(b * seq + s2) * width + col0 + d] as f64;
                    }
                    dq[(b * seq + s1) * width + col0 + d] = (acc * scale) as f32;
                }
            }
            for s2 in 0..seq {
                for d in 0..head_dim {
                    let mut acc = 0.0f64;
                    for s1 in 0..seq {
                        acc += ds[s1 * seq + s2] * q[(b * seq + s1) * width + col0 + d] as f64;
                    }
                    dk[(b * seq + s2) * width + col0 + d] = (acc * scale) as f32;
                }
            }
        }
    }
    vec![
        Tensor::from_parts(vec![batch * seq, width], dq),
        Tensor::from_parts(vec![batch * seq, width], dk),
        Tensor::from_parts(vec![batch * seq, width], dv),
    ]
}
