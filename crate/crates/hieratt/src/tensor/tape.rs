//! Reverse-mode autodiff tape.
//!
//! Forward methods compute values eagerly and record one entry per
//! operation. Node ids are assigned in creation order, so every input of a
//! node has a smaller id than the node itself and one reverse sweep visits
//! each node exactly once. Gradients accumulate additively across fan-out.
//!
//! A tape lives for one forward/backward step and is dropped afterwards;
//! models own plain `Tensor` buffers and re-register them as leaves each
//! step.

use super::kernels::*;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Affine { a: NodeId, mul: f64 },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Elu { a: NodeId, alpha: f64 },
    EmbeddingLookup { table: NodeId, ids: Vec<usize> },
    Dropout { a: NodeId, mask: Vec<f64> },
    Reshape { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    PoolMean { a: NodeId, axis: usize },
    SumAll { a: NodeId },
    Softmax { a: NodeId },
    Conv1dCausal { x: NodeId, kernels: NodeId, bias: NodeId },
    Conv2d { x: NodeId, kernels: NodeId, bias: NodeId, stride: usize, pad: usize },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, pad_id: Option<usize>, count: usize },
    CrossEntropySoft { logits: NodeId, target_probs: Vec<f64> },
    Gather { a: NodeId, idx: Vec<usize> },
    TanhCorrupted { a: NodeId },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// The generic entry point of the primitive set; each variant carries the
/// op-specific parameters its typed method takes.
#[derive(Debug, Clone)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Elu { alpha: f64 },
    EmbeddingLookup { ids: Vec<usize> },
    Dropout { rate: f64, train: bool, seed: u64 },
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
    PoolMean { axis: usize },
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape: operations are differentiable.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), recording: true }
    }

    /// Forward-only tape; `backward` on it is an error.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node past `len`, releasing their buffers. Used by
    /// incremental decoding to keep per-step memory bounded: parameters
    /// registered below the watermark survive, step scratch does not.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    // ── Node access ──────────────────────────────────────────────────

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].data.clone(), self.nodes[id.0].shape.clone())
    }

    /// Gradient of the last `backward` root w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, requires_grad && self.recording)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> NodeId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.push(data, shape, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![v], vec![1], Op::Leaf, false)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> NodeId {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { data, shape, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Primitive dispatch ───────────────────────────────────────────

    pub fn apply_primitive(&mut self, kind: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid("apply_primitive", format!("expected {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            Primitive::MatMul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Tanh => {
                want(1)?;
                self.tanh(inputs[0])
            }
            Primitive::Sigmoid => {
                want(1)?;
                self.sigmoid(inputs[0])
            }
            Primitive::Elu { alpha } => {
                want(1)?;
                self.elu(inputs[0], alpha)
            }
            Primitive::EmbeddingLookup { ids } => {
                want(1)?;
                self.embedding_lookup(inputs[0], &ids)
            }
            Primitive::Dropout { rate, train, seed } => {
                want(1)?;
                self.dropout(inputs[0], rate, train, seed)
            }
            Primitive::Reshape { shape } => {
                want(1)?;
                self.reshape(inputs[0], shape)
            }
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::PoolMean { axis } => {
                want(1)?;
                self.pool_mean(inputs[0], axis)
            }
        }
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::shape("matmul", format!("{ash:?} @ {bsh:?}")));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![m, n], Op::MatMul { a, b }, rg))
    }

    /// Batched matmul over matching leading dimension, with optional
    /// per-slice transposes (`ta`, `tb`); both transposed is unsupported.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || (ta && tb) {
            return Err(Error::shape("bmm", format!("{ash:?} x {bsh:?} (ta={ta}, tb={tb})")));
        }
        let batch = ash[0];
        let (m, k) = if ta { (ash[2], ash[1]) } else { (ash[1], ash[2]) };
        let (kb, n) = if tb { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if k != kb {
            return Err(Error::shape("bmm", format!("inner dims {k} vs {kb}")));
        }
        let (asl, bsl) = (ash[1] * ash[2], bsh[1] * bsh[2]);
        let mut data = vec![0.0; batch * m * n];
        for s in 0..batch {
            let av = &self.nodes[a.0].data[s * asl..(s + 1) * asl];
            let bv = &self.nodes[b.0].data[s * bsl..(s + 1) * bsl];
            let out = &mut data[s * m * n..(s + 1) * m * n];
            if ta {
                out.copy_from_slice(&matmul_tn(av, bv, k, m, n));
            } else if tb {
                out.copy_from_slice(&matmul_nt(av, bv, m, k, n));
            } else {
                matmul_nn_into(out, av, bv, m, k, n);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![batch, m, n], Op::Bmm { a, b, ta, tb }, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(Error::shape("transpose", format!("{sh:?} is not 2-D")));
        }
        let data = transpose_2d(self.data(a), sh[0], sh[1]);
        let rg = self.requires(a);
        Ok(self.push(data, vec![sh[1], sh[0]], Op::Transpose { a }, rg))
    }

    // ── Elementwise with broadcast ───────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&ash, &bsh)
            .ok_or_else(|| Error::shape(name, format!("{ash:?} vs {bsh:?}")))?;
        let data = broadcast_apply(self.data(a), &ash, self.data(b), &bsh, &out_shape, f);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, out_shape, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// y = mul*x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| mul * x + add).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, sh, Op::Affine { a, mul }, rg))
    }

    // ── Activations ──────────────────────────────────────────────────

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, sh, Op::Tanh { a }, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, sh, Op::Sigmoid { a }, rg))
    }

    pub fn elu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        let data: Vec<f64> =
            self.data(a).iter().map(|&x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) }).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, sh, Op::Elu { a, alpha }, rg))
    }

    /// tanh forward with a deliberately wrong backward rule. Exists only so
    /// the gradient checker's negative control has something to catch.
    #[doc(hidden)]
    pub fn tanh_corrupted(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, sh, Op::TanhCorrupted { a }, rg))
    }

    // ── Lookup / structure ───────────────────────────────────────────

    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let sh = self.shape(table).to_vec();
        if sh.len() != 2 {
            return Err(Error::shape("embedding_lookup", format!("table {sh:?} is not 2-D")));
        }
        let (v, e) = (sh[0], sh[1]);
        let mut data = vec![0.0; ids.len() * e];
        for (row, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Vocab(format!("token id {id} out of range (vocab {v})")));
            }
            data[row * e..(row + 1) * e].copy_from_slice(&self.nodes[table.0].data[id * e..(id + 1) * e]);
        }
        let rg = self.requires(table);
        Ok(self.push(data, vec![ids.len(), e], Op::EmbeddingLookup { table, ids: ids.to_vec() }, rg))
    }

    /// Inverted dropout with a deterministic per-seed mask; identity when
    /// `train` is false.
    pub fn dropout(&mut self, a: NodeId, rate: f64, train: bool, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0,1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mut rng = SplitMix64::new(seed);
        let n = self.nodes[a.0].data.len();
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.next_f64() < rate { 0.0 } else { 1.0 / keep }).collect();
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, sh, Op::Dropout { a, mask }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} elements) to {shape:?} ({numel})", self.shape(a), self.nodes[a.0].data.len()),
            ));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.requires(a);
        Ok(self.push(data, shape, Op::Reshape { a }, rg))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len()
                || sh.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{sh:?} vs {first:?} along axis {axis}")));
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let psh_axis = self.shape(p)[axis];
            let block = psh_axis * inner;
            for o in 0..outer {
                let src = &self.nodes[p.0].data[o * block..(o + 1) * block];
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + block].copy_from_slice(src);
            }
            offset += psh_axis;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(data, out_shape, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn pool_mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() {
            return Err(Error::invalid("pool_mean", format!("axis {axis} for rank {}", sh.len())));
        }
        let outer: usize = sh[..axis].iter().product();
        let len = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let mut out_shape = sh.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        let src = &self.nodes[a.0].data;
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        for v in &mut data {
            *v *= scale;
        }
        let rg = self.requires(a);
        Ok(self.push(data, out_shape, Op::PoolMean { a, axis }, rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.requires(a);
        Ok(self.push(vec![s], vec![1], Op::SumAll { a }, rg))
    }

    /// Row of values `idx` gathered from the flattened tensor.
    pub fn gather(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let n = self.nodes[a.0].data.len();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n {
                return Err(Error::invalid("gather", format!("index {i} out of {n}")));
            }
            data.push(self.nodes[a.0].data[i]);
        }
        let rg = self.requires(a);
        Ok(self.push(data, vec![idx.len()], Op::Gather { a, idx: idx.to_vec() }, rg))
    }

    // ── Softmax / losses ─────────────────────────────────────────────

    /// Softmax along the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        let last = *sh.last().unwrap_or(&0);
        if last == 0 || self.nodes[a.0].data.is_empty() {
            return Err(Error::Empty("softmax"));
        }
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_exact_mut(last) {
            softmax_row(row);
        }
        let rg = self.requires(a);
        Ok(self.push(data, sh, Op::Softmax { a }, rg))
    }

    /// Mean token-level cross entropy over non-pad positions.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad_id: Option<usize>,
    ) -> Result<NodeId> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {sh:?} vs {} targets", targets.len()),
            ));
        }
        let classes = sh[1];
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::Vocab(format!("target id {t} out of range (classes {classes})")));
            }
            if Some(t) == pad_id {
                continue;
            }
            let r = &self.nodes[logits.0].data[row * classes..(row + 1) * classes];
            total += log_sum_exp(r) - r[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("cross_entropy: all targets are padding"));
        }
        let rg = self.requires(logits);
        Ok(self.push(
            vec![total / count as f64],
            vec![1],
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad_id, count },
            rg,
        ))
    }

    /// Cross entropy of softmax(logits) rows against fixed target
    /// distributions, averaged over rows.
    pub fn cross_entropy_soft(&mut self, logits: NodeId, target_probs: &[f64]) -> Result<NodeId> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || sh[0] * sh[1] != target_probs.len() {
            return Err(Error::shape(
                "cross_entropy_soft",
                format!("logits {sh:?} vs {} target probabilities", target_probs.len()),
            ));
        }
        let (rows, classes) = (sh[0], sh[1]);
        if rows == 0 {
            return Err(Error::Empty("cross_entropy_soft"));
        }
        let mut total = 0.0;
        for r in 0..rows {
            let row = &self.nodes[logits.0].data[r * classes..(r + 1) * classes];
            let q = &target_probs[r * classes..(r + 1) * classes];
            let lse = log_sum_exp(row);
            for j in 0..classes {
                total += q[j] * (lse - row[j]);
            }
        }
        let rg = self.requires(logits);
        Ok(self.push(
            vec![total / rows as f64],
            vec![1],
            Op::CrossEntropySoft { logits, target_probs: target_probs.to_vec() },
            rg,
        ))
    }

    // ── Convolutions ─────────────────────────────────────────────────

    /// Causal 1-D convolution, channels-last batched layout.
    /// x: [B,T,Cin], kernels: [Cout,Cin,K], bias: [Cout] -> [B,T,Cout].
    /// Output position t reads x[.., t-K+1 ..= t, ..] with zero left-padding.
    pub fn conv1d_causal_btc(&mut self, x: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let xsh = self.shape(x).to_vec();
        let ksh = self.shape(kernels).to_vec();
        let bsh = self.shape(bias).to_vec();
        if xsh.len() != 3 || ksh.len() != 3 || xsh[2] != ksh[1] {
            return Err(Error::shape(
                "conv1d_causal",
                format!("x {xsh:?} (channels last) vs kernels {ksh:?}"),
            ));
        }
        if ksh[2] < 1 {
            return Err(Error::invalid("conv1d_causal", "kernel size must be >= 1".to_string()));
        }
        if bsh != vec![ksh[0]] {
            return Err(Error::shape("conv1d_causal", format!("bias {bsh:?} vs Cout {}", ksh[0])));
        }
        let (b, t, cin) = (xsh[0], xsh[1], xsh[2]);
        let (cout, k) = (ksh[0], ksh[2]);
        // Kernel re-laid as [K][Cin][Cout] so the inner loop is contiguous.
        let kt = relayout_kernel_1d(self.data(kernels), cout, cin, k);
        let bias_data = self.nodes[bias.0].data.clone();
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; b * t * cout];
        for bi in 0..b {
            for ti in 0..t {
                let orow = &mut data[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                orow.copy_from_slice(&bias_data);
                for j in 0..k {
                    let src = ti as isize + j as isize - (k as isize - 1);
                    if src < 0 {
                        continue;
                    }
                    let xrow = &xd[(bi * t + src as usize) * cin..(bi * t + src as usize + 1) * cin];
                    let kj = &kt[j * cin * cout..(j + 1) * cin * cout];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kj[ci * cout..(ci + 1) * cout];
                        for co in 0..cout {
                            orow[co] += xv * krow[co];
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(kernels) || self.requires(bias);
        Ok(self.push(data, vec![b, t, cout], Op::Conv1dCausal { x, kernels, bias }, rg))
    }

    /// Causal 1-D convolution in the channels-first single-sequence
    /// orientation: x [Cin,T] -> [Cout,T].
    pub fn conv1d_causal(&mut self, x: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 2 {
            return Err(Error::shape("conv1d_causal", format!("x {xsh:?} is not [Cin,T]")));
        }
        let xt = self.transpose(x)?; // [T,Cin]
        let x3 = self.reshape(xt, vec![1, xsh[1], xsh[0]])?;
        let y3 = self.conv1d_causal_btc(x3, kernels, bias)?;
        let cout = self.shape(y3)[2];
        let y2 = self.reshape(y3, vec![xsh[1], cout])?;
        self.transpose(y2) // [Cout,T]
    }

    /// 2-D convolution, channels-first: x [B,Cin,H,W], kernels
    /// [Cout,Cin,KH,KW], bias [Cout].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xsh = self.shape(x).to_vec();
        let ksh = self.shape(kernels).to_vec();
        if xsh.len() != 4 || ksh.len() != 4 || xsh[1] != ksh[1] {
            return Err(Error::shape("conv2d", format!("x {xsh:?} vs kernels {ksh:?}")));
        }
        if self.shape(bias) != [ksh[0]] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs Cout {}", self.shape(bias), ksh[0])));
        }
        let (b, cin, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (cout, kh, kw) = (ksh[0], ksh[2], ksh[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[kernels.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut data = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                let out = &mut data[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                out.fill(bd[co]);
                for ci in 0..cin {
                    let xplane = &xd[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                    let kplane = &kd[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = kplane[ky * kw + kx];
                            if kv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                                let orow = &mut out[oy * ow..(oy + 1) * ow];
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    orow[ox] += kv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(kernels) || self.requires(bias);
        Ok(self.push(data, vec![b, cout, oh, ow], Op::Conv2d { x, kernels, bias, stride, pad }, rg))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root; gradients land on every
    /// grad-enabled node and accumulate across fan-out.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.recording {
            return Err(Error::invalid("backward", "inference-mode tape records no operations".to_string()));
        }
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &g, &op);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, contribution: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => accumulate(g, contribution),
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64], op: &Op) {
        match op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let k = self.nodes[a.0].shape[1];
                if self.requires(*a) {
                    let da = matmul_nt(g, &self.nodes[b.0].data, m, n, k);
                    self.acc(*a, &da);
                }
                if self.requires(*b) {
                    let db = matmul_tn(&self.nodes[a.0].data, g, m, k, n);
                    self.acc(*b, &db);
                }
            }

            Op::Bmm { a, b, ta, tb } => {
                let ash = self.nodes[a.0].shape.clone();
                let bsh = self.nodes[b.0].shape.clone();
                let batch = ash[0];
                let (m, k) = if *ta { (ash[2], ash[1]) } else { (ash[1], ash[2]) };
                let n = if *tb { bsh[1] } else { bsh[2] };
                let (asl, bsl, osl) = (ash[1] * ash[2], bsh[1] * bsh[2], m * n);
                let mut da = vec![0.0; batch * asl];
                let mut db = vec![0.0; batch * bsl];
                for s in 0..batch {
                    let av = &self.nodes[a.0].data[s * asl..(s + 1) * asl];
                    let bv = &self.nodes[b.0].data[s * bsl..(s + 1) * bsl];
                    let gv = &g[s * osl..(s + 1) * osl];
                    let (das, dbs) = match (*ta, *tb) {
                        (false, false) => {
                            (matmul_nt(gv, bv, m, n, k), matmul_tn(av, gv, m, k, n))
                        }
                        (false, true) => {
                            // C = A @ B^T, B: [n,k]
                            (matmul_nn(gv, bv, m, n, k), matmul_tn(gv, av, m, n, k))
                        }
                        (true, false) => {
                            // C = A^T @ B, A: [k,m]
                            (matmul_nt(bv, gv, k, n, m), matmul_nn(av, gv, k, m, n))
                        }
                        (true, true) => unreachable!("rejected at construction"),
                    };
                    da[s * asl..(s + 1) * asl].copy_from_slice(&das);
                    db[s * bsl..(s + 1) * bsl].copy_from_slice(&dbs);
                }
                if self.requires(*a) {
                    self.acc(*a, &da);
                }
                if self.requires(*b) {
                    self.acc(*b, &db);
                }
            }

            Op::Transpose { a } => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let da = transpose_2d(g, r, c);
                self.acc(*a, &da);
            }

            Op::Add { a, b } => {
                let osh = self.nodes[i].shape.clone();
                if self.requires(*a) {
                    let da = reduce_grad_to_shape(g, &osh, &self.nodes[a.0].shape.clone());
                    self.acc(*a, &da);
                }
                if self.requires(*b) {
                    let db = reduce_grad_to_shape(g, &osh, &self.nodes[b.0].shape.clone());
                    self.acc(*b, &db);
                }
            }

            Op::Sub { a, b } => {
                let osh = self.nodes[i].shape.clone();
                if self.requires(*a) {
                    let da = reduce_grad_to_shape(g, &osh, &self.nodes[a.0].shape.clone());
                    self.acc(*a, &da);
                }
                if self.requires(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    let db = reduce_grad_to_shape(&neg, &osh, &self.nodes[b.0].shape.clone());
                    self.acc(*b, &db);
                }
            }

            Op::Mul { a, b } => {
                let osh = self.nodes[i].shape.clone();
                let ash = self.nodes[a.0].shape.clone();
                let bsh = self.nodes[b.0].shape.clone();
                if self.requires(*a) {
                    let full = broadcast_apply(g, &osh, &self.nodes[b.0].data, &bsh, &osh, |gv, bv| gv * bv);
                    let da = reduce_grad_to_shape(&full, &osh, &ash);
                    self.acc(*a, &da);
                }
                if self.requires(*b) {
                    let full = broadcast_apply(g, &osh, &self.nodes[a.0].data, &ash, &osh, |gv, av| gv * av);
                    let db = reduce_grad_to_shape(&full, &osh, &bsh);
                    self.acc(*b, &db);
                }
            }

            Op::Div { a, b } => {
                let osh = self.nodes[i].shape.clone();
                let ash = self.nodes[a.0].shape.clone();
                let bsh = self.nodes[b.0].shape.clone();
                if self.requires(*a) {
                    let full = broadcast_apply(g, &osh, &self.nodes[b.0].data, &bsh, &osh, |gv, bv| gv / bv);
                    let da = reduce_grad_to_shape(&full, &osh, &ash);
                    self.acc(*a, &da);
                }
                if self.requires(*b) {
                    // d(a/b)/db = -a/b^2 = -out/b
                    let gout: Vec<f64> = g.iter().zip(&self.nodes[i].data).map(|(gv, ov)| gv * ov).collect();
                    let full = broadcast_apply(&gout, &osh, &self.nodes[b.0].data, &bsh, &osh, |x, bv| -x / bv);
                    let db = reduce_grad_to_shape(&full, &osh, &bsh);
                    self.acc(*b, &db);
                }
            }

            Op::Affine { a, mul } => {
                let da: Vec<f64> = g.iter().map(|x| mul * x).collect();
                self.acc(*a, &da);
            }

            Op::Tanh { a } => {
                let da: Vec<f64> =
                    g.iter().zip(&self.nodes[i].data).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.acc(*a, &da);
            }

            Op::Sigmoid { a } => {
                let da: Vec<f64> =
                    g.iter().zip(&self.nodes[i].data).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.acc(*a, &da);
            }

            Op::Elu { a, alpha } => {
                let xd = self.nodes[a.0].data.clone();
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].data.iter().zip(&xd))
                    .map(|(gv, (y, x))| if *x > 0.0 { *gv } else { gv * (y + alpha) })
                    .collect();
                self.acc(*a, &da);
            }

            Op::TanhCorrupted { a } => {
                // Intentionally off by 5%.
                let da: Vec<f64> =
                    g.iter().zip(&self.nodes[i].data).map(|(gv, y)| gv * (1.0 - y * y) * 1.05).collect();
                self.acc(*a, &da);
            }

            Op::EmbeddingLookup { table, ids } => {
                if self.requires(*table) {
                    let e = self.nodes[table.0].shape[1];
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        accumulate(&mut dt[id * e..(id + 1) * e], &g[row * e..(row + 1) * e]);
                    }
                    self.acc(*table, &dt);
                }
            }

            Op::Dropout { a, mask } => {
                let da: Vec<f64> = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.acc(*a, &da);
            }

            Op::Reshape { a } => {
                self.acc(*a, g);
            }

            Op::Concat { parts, axis } => {
                let osh = self.nodes[i].shape.clone();
                let outer: usize = osh[..*axis].iter().product();
                let inner: usize = osh[*axis + 1..].iter().product();
                let total_axis = osh[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let psh_axis = self.nodes[p.0].shape[*axis];
                    if self.requires(p) {
                        let block = psh_axis * inner;
                        let mut dp = vec![0.0; outer * block];
                        for o in 0..outer {
                            let src_start = o * total_axis * inner + offset * inner;
                            dp[o * block..(o + 1) * block]
                                .copy_from_slice(&g[src_start..src_start + block]);
                        }
                        self.acc(p, &dp);
                    }
                    offset += psh_axis;
                }
            }

            Op::PoolMean { a, axis } => {
                let ash = self.nodes[a.0].shape.clone();
                let outer: usize = ash[..*axis].iter().product();
                let len = ash[*axis];
                let inner: usize = ash[*axis + 1..].iter().product();
                let scale = 1.0 / len as f64;
                let mut da = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for ii in 0..inner {
                            dst[ii] = grow[ii] * scale;
                        }
                    }
                }
                self.acc(*a, &da);
            }

            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[a.0].data.len()];
                self.acc(*a, &da);
            }

            Op::Gather { a, idx } => {
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for (j, &src) in idx.iter().enumerate() {
                    da[src] += g[j];
                }
                self.acc(*a, &da);
            }

            Op::Softmax { a } => {
                let last = *self.nodes[i].shape.last().unwrap();
                let y = self.nodes[i].data.clone();
                let mut da = vec![0.0; y.len()];
                for (row, (yr, gr)) in y.chunks_exact(last).zip(g.chunks_exact(last)).enumerate() {
                    let dotv = dot(yr, gr);
                    let dst = &mut da[row * last..(row + 1) * last];
                    for j in 0..last {
                        dst[j] = yr[j] * (gr[j] - dotv);
                    }
                }
                self.acc(*a, &da);
            }

            Op::CrossEntropy { logits, targets, pad_id, count } => {
                let classes = self.nodes[logits.0].shape[1];
                let mut dl = vec![0.0; self.nodes[logits.0].data.len()];
                let scale = g[0] / *count as f64;
                for (row, &t) in targets.iter().enumerate() {
                    if Some(t) == *pad_id {
                        continue;
                    }
                    let r = &self.nodes[logits.0].data[row * classes..(row + 1) * classes];
                    let mut probs = r.to_vec();
                    softmax_row(&mut probs);
                    let dst = &mut dl[row * classes..(row + 1) * classes];
                    for j in 0..classes {
                        dst[j] = scale * (probs[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.acc(*logits, &dl);
            }

            Op::CrossEntropySoft { logits, target_probs } => {
                let (rows, classes) =
                    (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let mut dl = vec![0.0; rows * classes];
                let scale = g[0] / rows as f64;
                for row in 0..rows {
                    let r = &self.nodes[logits.0].data[row * classes..(row + 1) * classes];
                    let mut probs = r.to_vec();
                    softmax_row(&mut probs);
                    let q = &target_probs[row * classes..(row + 1) * classes];
                    let dst = &mut dl[row * classes..(row + 1) * classes];
                    for j in 0..classes {
                        dst[j] = scale * (probs[j] - q[j]);
                    }
                }
                self.acc(*logits, &dl);
            }

            Op::Conv1dCausal { x, kernels, bias } => {
                let xsh = self.nodes[x.0].shape.clone();
                let ksh = self.nodes[kernels.0].shape.clone();
                let (b, t, cin) = (xsh[0], xsh[1], xsh[2]);
                let (cout, k) = (ksh[0], ksh[2]);
                let kt = relayout_kernel_1d(&self.nodes[kernels.0].data, cout, cin, k);
                if self.requires(*bias) {
                    let mut dbias = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        accumulate(&mut dbias, row);
                    }
                    self.acc(*bias, &dbias);
                }
                if self.requires(*kernels) {
                    let mut dkt = vec![0.0; k * cin * cout];
                    let xd = &self.nodes[x.0].data;
                    for bi in 0..b {
                        for ti in 0..t {
                            let grow = &g[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                            for j in 0..k {
                                let src = ti as isize + j as isize - (k as isize - 1);
                                if src < 0 {
                                    continue;
                                }
                                let xrow = &xd
                                    [(bi * t + src as usize) * cin..(bi * t + src as usize + 1) * cin];
                                let dkj = &mut dkt[j * cin * cout..(j + 1) * cin * cout];
                                for (ci, &xv) in xrow.iter().enumerate() {
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let drow = &mut dkj[ci * cout..(ci + 1) * cout];
                                    for co in 0..cout {
                                        drow[co] += xv * grow[co];
                                    }
                                }
                            }
                        }
                    }
                    // back to [Cout,Cin,K]
                    let mut dk = vec![0.0; cout * cin * k];
                    for j in 0..k {
                        for ci in 0..cin {
                            for co in 0..cout {
                                dk[(co * cin + ci) * k + j] = dkt[(j * cin + ci) * cout + co];
                            }
                        }
                    }
                    self.acc(*kernels, &dk);
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0; b * t * cin];
                    for bi in 0..b {
                        for ti in 0..t {
                            let grow = &g[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                            for j in 0..k {
                                let src = ti as isize + j as isize - (k as isize - 1);
                                if src < 0 {
                                    continue;
                                }
                                let dxrow = &mut dx
                                    [(bi * t + src as usize) * cin..(bi * t + src as usize + 1) * cin];
                                let kj = &kt[j * cin * cout..(j + 1) * cin * cout];
                                for ci in 0..cin {
                                    dxrow[ci] += dot(&kj[ci * cout..(ci + 1) * cout], grow);
                                }
                            }
                        }
                    }
                    self.acc(*x, &dx);
                }
            }

            Op::Conv2d { x, kernels, bias, stride, pad } => {
                let xsh = self.nodes[x.0].shape.clone();
                let osh = self.nodes[i].shape.clone();
                let ksh = self.nodes[kernels.0].shape.clone();
                let (b, cin, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                let (cout, kh, kw) = (ksh[0], ksh[2], ksh[3]);
                let (oh, ow) = (osh[2], osh[3]);
                if self.requires(*bias) {
                    let mut dbias = vec![0.0; cout];
                    for bi in 0..b {
                        for co in 0..cout {
                            let plane = &g[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                            dbias[co] += plane.iter().sum::<f64>();
                        }
                    }
                    self.acc(*bias, &dbias);
                }
                let need_dk = self.requires(*kernels);
                let need_dx = self.requires(*x);
                if need_dk || need_dx {
                    let mut dk = vec![0.0; cout * cin * kh * kw];
                    let mut dx = vec![0.0; b * cin * h * w];
                    let xd = &self.nodes[x.0].data;
                    let kd = &self.nodes[kernels.0].data;
                    for bi in 0..b {
                        for co in 0..cout {
                            let gplane = &g[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                            for ci in 0..cin {
                                let xplane = &xd[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                                let kplane_base = (co * cin + ci) * kh * kw;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let kv = kd[kplane_base + ky * kw + kx];
                                        let mut dkv = 0.0;
                                        for oy in 0..oh {
                                            let iy = (oy * stride + ky) as isize - *pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                                            for ox in 0..ow {
                                                let ix = (ox * stride + kx) as isize - *pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let xi = iy as usize * w + ix as usize;
                                                let gv = grow[ox];
                                                dkv += gv * xplane[xi];
                                                if need_dx {
                                                    dx[(bi * cin + ci) * h * w + xi] += gv * kv;
                                                }
                                            }
                                        }
                                        dk[kplane_base + ky * kw + kx] += dkv;
                                    }
                                }
                            }
                        }
                    }
                    if need_dk {
                        self.acc(*kernels, &dk);
                    }
                    if need_dx {
                        self.acc(*x, &dx);
                    }
                }
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place stable softmax of one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// [Cout,Cin,K] -> [K][Cin][Cout]
fn relayout_kernel_1d(kd: &[f64], cout: usize, cin: usize, k: usize) -> Vec<f64> {
    let mut kt = vec![0.0; k * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for j in 0..k {
                kt[(j * cin + ci) * cout + co] = kd[(co * cin + ci) * k + j];
            }
        }
    }
    kt
}
