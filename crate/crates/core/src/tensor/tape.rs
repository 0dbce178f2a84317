//! Define-by-run reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Ops append nodes in
//! topological order (inputs always recorded earlier); `backward` walks the
//! nodes once in reverse, accumulating vector-Jacobian products into every
//! node that transitively depends on a grad-requiring leaf.
//!
//! Activations use a column-per-token convention: a linear map is
//! `W[out×in] · x[in×seq]`, a bias adds one vector to every column, and
//! layer norm normalizes each column.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    /// [m×k]·[k×n]; dA = dC·Bᵀ, dB = Aᵀ·dC
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: S },
    /// x[m×n] + bias[m] broadcast across columns
    BiasAdd { x: TensorId, bias: TensorId },
    SoftmaxRows { x: TensorId },
    /// mean over rows of −log softmax(row)[target]
    CrossEntropy { logits: TensorId, targets: Vec<usize> },
    /// Σ x², scalar
    FrobeniusSq { x: TensorId },
    /// out[:,t] = table[indices[t],:]ᵀ — one column per looked-up row
    Embed { table: TensorId, indices: Vec<usize> },
    /// per-column normalization with learned gain/bias vectors
    LayerNormCols { x: TensorId, gain: TensorId, bias: TensorId },
    Gelu { x: TensorId },
    SliceRows { x: TensorId, start: usize, end: usize },
    SliceCols { x: TensorId, start: usize, end: usize },
    ConcatRows { parts: Vec<TensorId> },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
    value: Vec<S>,
    shape: Vec<usize>,
    /// True when this node transitively depends on a grad-requiring leaf.
    needs_grad: bool,
    grad: Option<Vec<S>>,
}

/// Wengert list of recorded op nodes.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Vec<S>, shape: Vec<usize>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            shape,
            needs_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node<S> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.node(id).value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.node(id).value.len(), 1);
        self.node(id).value[0]
    }

    /// Accumulated gradient, present only after `backward` and only on nodes
    /// that required it.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.node(id).grad.as_deref()
    }

    /// Snapshot of a node as a plain tensor.
    pub fn tensor(&self, id: TensorId) -> Tensor<S> {
        Tensor::from_vec(self.node(id).shape.clone(), self.node(id).value.clone())
            .expect("tape node shape is consistent")
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Record a leaf from a tensor, inheriting its `requires_grad` flag.
    /// The tape snapshots the data; later mutation of the tensor does not
    /// affect this pass.
    pub fn leaf(&mut self, t: &Tensor<S>) -> TensorId {
        self.push(
            Op::Leaf,
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
        )
    }

    /// Constant leaf: never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<TensorId> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.leaf(&t))
    }

    // ── ops ──────────────────────────────────────────────────────────

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        match self.node(id).shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[])),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                &self.node(a).shape,
                &self.node(b).shape,
            ));
        }
        let value = kernels::matmul(&self.node(a).value, &self.node(b).value, m, k, n);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Matmul { a, b }, value, vec![m, n], needs))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let value = kernels::transpose(&self.node(x).value, r, c);
        let needs = self.node(x).needs_grad;
        Ok(self.push(Op::Transpose { x }, value, vec![c, r], needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::shape("add", &self.node(a).shape, &self.node(b).shape));
        }
        let value: Vec<S> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Add { a, b }, value, shape, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::shape("mul", &self.node(a).shape, &self.node(b).shape));
        }
        let value: Vec<S> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Mul { a, b }, value, shape, needs))
    }

    pub fn scale(&mut self, x: TensorId, factor: S) -> TensorId {
        let value: Vec<S> = self.node(x).value.iter().map(|&v| v * factor).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.node(x).needs_grad;
        self.push(Op::Scale { x, factor }, value, shape, needs)
    }

    /// x[m×n] plus a length-m bias added to every column.
    pub fn bias_add(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "bias_add")?;
        if self.node(bias).shape != [m] {
            return Err(Error::shape(
                "bias_add",
                &self.node(x).shape,
                &self.node(bias).shape,
            ));
        }
        let xv = &self.node(x).value;
        let bv = &self.node(bias).value;
        let mut value = xv.clone();
        for i in 0..m {
            for j in 0..n {
                value[i * n + j] += bv[i];
            }
        }
        let needs = self.node(x).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(Op::BiasAdd { x, bias }, value, vec![m, n], needs))
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        let value = kernels::softmax_rows(&self.node(x).value, r, c);
        let needs = self.node(x).needs_grad;
        Ok(self.push(Op::SoftmaxRows { x }, value, vec![r, c], needs))
    }

    /// Mean over rows of −log softmax(logits)[target]. Scalar output.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (m, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", &[m], &[targets.len()]));
        }
        for &t in targets {
            if t >= v {
                return Err(Error::Index { index: t, len: v });
            }
        }
        let lv = &self.node(logits).value;
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            total += kernels::log_sum_exp(row) - row[t];
        }
        let mean = total / S::from_f64(m as f64);
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![mean],
            vec![1],
            needs,
        ))
    }

    /// Sum of squared entries. Scalar output; gradient is 2x.
    pub fn frobenius_sq(&mut self, x: TensorId) -> TensorId {
        let value = vec![kernels::frobenius_sq(&self.node(x).value)];
        let needs = self.node(x).needs_grad;
        self.push(Op::FrobeniusSq { x }, value, vec![1], needs)
    }

    /// Gather: one column per index, out[d×L] from table[V×d].
    pub fn embed(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (vocab, d) = self.dims2(table, "embed")?;
        for &t in indices {
            if t >= vocab {
                return Err(Error::Index {
                    index: t,
                    len: vocab,
                });
            }
        }
        let l = indices.len();
        if l == 0 {
            return Err(Error::shape("embed", &[0], &[vocab, d]));
        }
        let tv = &self.node(table).value;
        let mut value = vec![S::zero(); d * l];
        for (col, &tok) in indices.iter().enumerate() {
            for i in 0..d {
                value[i * l + col] = tv[tok * d + i];
            }
        }
        let needs = self.node(table).needs_grad;
        Ok(self.push(
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
            value,
            vec![d, l],
            needs,
        ))
    }

    /// Layer norm over each column of x[d×n]: γ ⊙ (col − μ)/√(σ² + ε) + β.
    pub fn layer_norm_cols(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (d, n) = self.dims2(x, "layer_norm")?;
        if self.node(gain).shape != [d] || self.node(bias).shape != [d] {
            return Err(Error::shape(
                "layer_norm",
                &self.node(x).shape,
                &self.node(gain).shape,
            ));
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let dd = S::from_f64(d as f64);
        let xv = &self.node(x).value;
        let gv = &self.node(gain).value;
        let bv = &self.node(bias).value;
        let mut value = vec![S::zero(); d * n];
        for j in 0..n {
            let mut mean = S::zero();
            for i in 0..d {
                mean += xv[i * n + j];
            }
            mean = mean / dd;
            let mut var = S::zero();
            for i in 0..d {
                let c = xv[i * n + j] - mean;
                var += c * c;
            }
            var = var / dd;
            let inv = (var + eps).sqrt().recip();
            for i in 0..d {
                value[i * n + j] = gv[i] * (xv[i * n + j] - mean) * inv + bv[i];
            }
        }
        let needs =
            self.node(x).needs_grad || self.node(gain).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(Op::LayerNormCols { x, gain, bias }, value, vec![d, n], needs))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let value: Vec<S> = self.node(x).value.iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.node(x).needs_grad;
        self.push(Op::Gelu { x }, value, shape, needs)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::Index { index: end, len: r });
        }
        let value = self.node(x).value[start * c..end * c].to_vec();
        let needs = self.node(x).needs_grad;
        Ok(self.push(Op::SliceRows { x, start, end }, value, vec![end - start, c], needs))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Index { index: end, len: c });
        }
        let xv = &self.node(x).value;
        let w = end - start;
        let mut value = vec![S::zero(); r * w];
        for i in 0..r {
            for j in 0..w {
                value[i * w + j] = xv[i * c + start + j];
            }
        }
        let needs = self.node(x).needs_grad;
        Ok(self.push(Op::SliceCols { x, start, end }, value, vec![r, w], needs))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", &[], &[]));
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut value = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", &[rows, c], &self.node(p).shape));
            }
            rows += r;
            value.extend_from_slice(&self.node(p).value);
            needs |= self.node(p).needs_grad;
        }
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            value,
            vec![rows, c],
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every grad-requiring leaf that the
    /// loss depends on ends up holding ∂loss/∂leaf. A second call on the
    /// same tape is a state error; define-by-run code rebuilds the tape
    /// instead of reusing it.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::shape("backward", &self.node(loss).shape, &[1]));
        }
        if self.backward_done {
            return Err(Error::state(
                "backward already ran on this tape; rebuild the tape before differentiating again",
            ));
        }
        self.backward_done = true;
        if !self.node(loss).needs_grad {
            // Constant loss: nothing requires grad, backward is a no-op.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = self.nodes[idx].grad.clone().expect("checked above");
            let op = self.nodes[idx].op.clone();
            self.apply_vjp(&op, idx, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[S]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.nodes[id.0].grad = Some(contrib.to_vec()),
        }
    }

    fn apply_vjp(&mut self, op: &Op<S>, out_idx: usize, dout: &[S]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![S::zero(); m * k];
                    kernels::matmul_nt_acc(dout, &self.nodes[b.0].value, &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![S::zero(); k * n];
                    kernels::matmul_tn_acc(&self.nodes[a.0].value, dout, &mut db, m, k, n);
                    self.accumulate(*b, &db);
                }
            }

            Op::Transpose { x } => {
                let (c, r) = (self.nodes[out_idx].shape[0], self.nodes[out_idx].shape[1]);
                let dx = kernels::transpose(dout, c, r);
                self.accumulate(*x, &dx);
            }

            Op::Add { a, b } => {
                self.accumulate(*a, dout);
                self.accumulate(*b, dout);
            }

            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let da: Vec<S> = dout
                        .iter()
                        .zip(&self.nodes[b.0].value)
                        .map(|(&d, &bv)| d * bv)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<S> = dout
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(&d, &av)| d * av)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }

            Op::Scale { x, factor } => {
                let dx: Vec<S> = dout.iter().map(|&d| d * *factor).collect();
                self.accumulate(*x, &dx);
            }

            Op::BiasAdd { x, bias } => {
                let (m, n) = (self.nodes[out_idx].shape[0], self.nodes[out_idx].shape[1]);
                self.accumulate(*x, dout);
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![S::zero(); m];
                    for i in 0..m {
                        for j in 0..n {
                            db[i] += dout[i * n + j];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }

            Op::SoftmaxRows { x } => {
                let (r, c) = (self.nodes[out_idx].shape[0], self.nodes[out_idx].shape[1]);
                let p = &self.nodes[out_idx].value;
                let mut dx = vec![S::zero(); r * c];
                for row in 0..r {
                    let base = row * c;
                    let mut dot = S::zero();
                    for j in 0..c {
                        dot += dout[base + j] * p[base + j];
                    }
                    for j in 0..c {
                        dx[base + j] = p[base + j] * (dout[base + j] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }

            Op::CrossEntropy { logits, targets } => {
                let v = self.nodes[logits.0].shape[1];
                let m = targets.len();
                let lv = &self.nodes[logits.0].value;
                let scale = dout[0] / S::from_f64(m as f64);
                let mut dl = vec![S::zero(); m * v];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv[r * v..(r + 1) * v];
                    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                    let mut sum = S::zero();
                    for j in 0..v {
                        let e = (row[j] - max).exp();
                        dl[r * v + j] = e;
                        sum += e;
                    }
                    for j in 0..v {
                        dl[r * v + j] = dl[r * v + j] / sum;
                    }
                    dl[r * v + t] -= S::one();
                    for j in 0..v {
                        dl[r * v + j] *= scale;
                    }
                }
                self.accumulate(*logits, &dl);
            }

            Op::FrobeniusSq { x } => {
                let two = S::from_f64(2.0);
                let dx: Vec<S> = self.nodes[x.0]
                    .value
                    .iter()
                    .map(|&v| two * v * dout[0])
                    .collect();
                self.accumulate(*x, &dx);
            }

            Op::Embed { table, indices } => {
                let (vocab, d) = (self.nodes[table.0].shape[0], self.nodes[table.0].shape[1]);
                let l = indices.len();
                let mut dt = vec![S::zero(); vocab * d];
                for (col, &tok) in indices.iter().enumerate() {
                    for i in 0..d {
                        dt[tok * d + i] += dout[i * l + col];
                    }
                }
                self.accumulate(*table, &dt);
            }

            Op::LayerNormCols { x, gain, bias } => {
                let (d, n) = (self.nodes[out_idx].shape[0], self.nodes[out_idx].shape[1]);
                let eps = S::from_f64(LAYER_NORM_EPS);
                let dd = S::from_f64(d as f64);
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let mut dx = vec![S::zero(); d * n];
                let mut dg = vec![S::zero(); d];
                let mut db = vec![S::zero(); d];
                for j in 0..n {
                    let mut mean = S::zero();
                    for i in 0..d {
                        mean += xv[i * n + j];
                    }
                    mean = mean / dd;
                    let mut var = S::zero();
                    for i in 0..d {
                        let c = xv[i * n + j] - mean;
                        var += c * c;
                    }
                    var = var / dd;
                    let inv = (var + eps).sqrt().recip();

                    // dg, db, and the three-term column VJP.
                    let mut sum_gdy = S::zero();
                    let mut sum_gdy_xhat = S::zero();
                    for i in 0..d {
                        let xhat = (xv[i * n + j] - mean) * inv;
                        let dy = dout[i * n + j];
                        dg[i] += dy * xhat;
                        db[i] += dy;
                        let gdy = gv[i] * dy;
                        sum_gdy += gdy;
                        sum_gdy_xhat += gdy * xhat;
                    }
                    let mean_gdy = sum_gdy / dd;
                    let mean_gdy_xhat = sum_gdy_xhat / dd;
                    for i in 0..d {
                        let xhat = (xv[i * n + j] - mean) * inv;
                        let gdy = gv[i] * dout[i * n + j];
                        dx[i * n + j] = (gdy - mean_gdy - xhat * mean_gdy_xhat) * inv;
                    }
                }
                self.accumulate(*x, &dx);
                if self.nodes[gain.0].needs_grad {
                    self.accumulate(*gain, &dg);
                }
                if self.nodes[bias.0].needs_grad {
                    self.accumulate(*bias, &db);
                }
            }

            Op::Gelu { x } => {
                let dx: Vec<S> = self.nodes[x.0]
                    .value
                    .iter()
                    .zip(dout)
                    .map(|(&v, &d)| d * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(*x, &dx);
            }

            Op::SliceRows { x, start, end } => {
                let c = self.nodes[x.0].shape[1];
                let r = self.nodes[x.0].shape[0];
                let mut dx = vec![S::zero(); r * c];
                dx[start * c..end * c].copy_from_slice(dout);
                self.accumulate(*x, &dx);
            }

            Op::SliceCols { x, start, end } => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let w = end - start;
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..w {
                        dx[i * c + start + j] = dout[i * w + j];
                    }
                }
                self.accumulate(*x, &dx);
            }

            Op::ConcatRows { parts } => {
                let c = self.nodes[out_idx].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pr = self.nodes[p.0].shape[0];
                    let chunk = &dout[offset..offset + pr * c];
                    self.accumulate(p, chunk);
                    offset += pr * c;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<S: Scalar>(shape: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::<f32>::new();
        let eye = tape.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let v = tape.leaf(&t(vec![2, 1], vec![3.0, 4.0]));
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(out), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        // [[1,2],[3,4]] × [[5],[6]] = [[17],[39]]
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(vec![2, 1], vec![5.0, 6.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_dimension_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.leaf(&Tensor::zeros(vec![4, 5]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_rule() {
        // loss = sum of C where C = A·B via frobenius on 1x1
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]).with_grad());
        let b = tape.leaf(&t(vec![2, 1], vec![3.0, 4.0]).with_grad());
        let c = tape.matmul(a, b).unwrap();
        tape.backward(c).unwrap();
        // dA = dC·Bᵀ = [3,4]; dB = Aᵀ·dC = [1,2]ᵀ
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry_and_stabilization() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t(vec![1, 2], vec![0.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let big = tape.leaf(&t(vec![1, 2], vec![1000.0, 1000.0]));
        let s2 = tape.softmax_rows(big).unwrap();
        let v = tape.value(s2);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 0.5).abs() < 1e-6 && (v[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 3] → [0.25, 0.75]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![1, 2], vec![0.0, 3.0f64.ln()]));
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::<f64>::new();
        let confident = tape.leaf(&t(vec![1, 2], vec![10.0, -10.0]));
        let l = tape.cross_entropy(confident, &[0]).unwrap();
        assert!(tape.scalar_value(l) < 1e-8);

        let even = tape.leaf(&t(vec![1, 2], vec![0.0, 0.0]));
        let l2 = tape.cross_entropy(even, &[1]).unwrap();
        assert!((tape.scalar_value(l2) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(&Tensor::zeros(vec![1, 2]).unwrap());
        let err = tape.cross_entropy(logits, &[5]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 5, len: 2 }));
    }

    #[test]
    fn frobenius_cases() {
        let mut tape = Tape::<f32>::new();
        let zero = tape.leaf(&Tensor::zeros(vec![3, 3]).unwrap());
        let f0 = tape.frobenius_sq(zero);
        assert_eq!(tape.scalar_value(f0), 0.0);

        let m = tape.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let f = tape.frobenius_sq(m);
        assert_eq!(tape.scalar_value(f), 30.0);

        let r = 5;
        let mut eye = vec![0.0f32; r * r];
        for i in 0..r {
            eye[i * r + i] = 1.0;
        }
        let i5 = tape.leaf(&t(vec![r, r], eye));
        let fr = tape.frobenius_sq(i5);
        assert_eq!(tape.scalar_value(fr), r as f32);
    }

    #[test]
    fn frobenius_gradient_is_2x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]).with_grad());
        let l = tape.frobenius_sq(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]).with_grad());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t(vec![1, 1], vec![2.0]).with_grad());
        let l = tape.frobenius_sq(x);
        tape.backward(l).unwrap();
        let err = tape.backward(l).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn constant_loss_backward_is_noop() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0])); // no grad
        let l = tape.frobenius_sq(x);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn two_identical_tapes_give_bitwise_identical_gradients() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.leaf(&Tensor::randn(vec![3, 3], 1.0, 11).unwrap().with_grad());
            let b = tape.leaf(&Tensor::randn(vec![3, 3], 1.0, 12).unwrap().with_grad());
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c).unwrap();
            let l = tape.frobenius_sq(s);
            tape.backward(l).unwrap();
            (tape.grad(a).unwrap().to_vec(), tape.grad(b).unwrap().to_vec())
        };
        let (g1a, g1b) = run();
        let (g2a, g2b) = run();
        assert_eq!(g1a, g2a);
        assert_eq!(g1b, g2b);
    }

    #[test]
    fn embed_rejects_out_of_range_index() {
        let mut tape = Tape::<f32>::new();
        let table = tape.leaf(&Tensor::zeros(vec![4, 2]).unwrap());
        assert!(tape.embed(table, &[3]).is_ok());
        assert!(matches!(
            tape.embed(table, &[4]).unwrap_err(),
            Error::Index { index: 4, len: 4 }
        ));
    }
}
