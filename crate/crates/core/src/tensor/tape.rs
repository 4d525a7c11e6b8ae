//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Tape`] owns an arena of value buffers. Forward ops compute eagerly,
//! push their result into the arena and record an [`Op`] entry; `backward`
//! replays the recorded ops in reverse, accumulating gradients into buffers
//! parallel to the arena. A tape is built per forward pass and dropped after
//! the backward pass — nothing is retained across iterations.
//!
//! Gradient accumulation is sequential and index-ordered, so results do not
//! depend on scheduling. Each node has exactly one producing op, which lets
//! `backward` move (rather than copy) an output gradient once the producer
//! has consumed it.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a value on a [`Tape`]. Only meaningful for the tape that
/// issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    needs_grad: bool,
}

enum Op<S> {
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    Transpose { x: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    AddRow { x: NodeId, row: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { x: NodeId, c: S, out: NodeId },
    Softmax { x: NodeId, out: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: S, out: NodeId },
    Gelu { x: NodeId, out: NodeId },
    EmbedLookup { table: NodeId, ids: Arc<[u32]>, out: NodeId },
    ConcatRows { parts: Vec<NodeId>, out: NodeId },
    SliceRows { x: NodeId, start: usize, out: NodeId },
    Reshape { x: NodeId, out: NodeId },
    Clip { x: NodeId, lo: S, hi: S, out: NodeId },
    Gather { x: NodeId, idx: Arc<[u32]>, out: NodeId },
    CrossEntropy { logits: NodeId, targets: Arc<[u32]>, out: NodeId },
    Sum { x: NodeId, out: NodeId },
}

/// Gradients produced by [`Tape::backward`], addressed by the `NodeId`s of
/// the tape that produced them. Nodes that do not require a gradient, or
/// that the loss does not depend on, have no entry.
#[derive(Debug)]
pub struct GradMap<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> GradMap<S> {
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient as a tensor of the node's shape; zeros when absent.
    pub fn tensor_or_zeros(&self, id: NodeId) -> Tensor<S> {
        match &self.grads[id.0] {
            Some(g) => Tensor::new(self.shapes[id.0].clone(), g.clone())
                .expect("gradient buffers always match node shapes"),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Registers a tensor as a leaf; it participates in gradients when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), t.wants_grad())
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<S>) -> NodeId {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Registers a tensor with an explicit gradient flag, overriding the
    /// tensor's own `requires_grad` marker.
    pub fn input(&mut self, t: &Tensor<S>, needs_grad: bool) -> NodeId {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), needs_grad)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    /// Copies a node's value out as a tensor.
    pub fn value(&self, id: NodeId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node buffers always match their shapes")
    }

    /// Reads a single-element node.
    pub fn scalar(&self, id: NodeId) -> Result<S> {
        let n = &self.nodes[id.0];
        if n.data.len() != 1 {
            return Err(Error::NonScalarLoss(n.shape.clone()));
        }
        Ok(n.data[0])
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<S>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
        });
        id
    }

    fn out_node(&mut self, shape: Vec<usize>, data: Vec<S>, inputs: &[NodeId]) -> NodeId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push_node(shape, data, needs)
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: [{m}, {k}] vs [{k2}, {n}]"),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            &self.nodes[a.0].data,
            k as isize,
            1,
            &self.nodes[b.0].data,
            n as isize,
            1,
            S::zero(),
            &mut out,
            n as isize,
            1,
        );
        let id = self.out_node(vec![m, n], out, &[a, b]);
        self.ops.push(Op::Matmul { a, b, out: id });
        Ok(id)
    }

    /// `[r,c] → [c,r]`.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = &self.nodes[x.0].data;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let id = self.out_node(vec![c, r], out, &[x]);
        self.ops.push(Op::Transpose { x, out: id });
        Ok(id)
    }

    /// Element-wise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let id = self.out_node(shape, out, &[a, b]);
        self.ops.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    /// Adds a length-`c` vector to every row of an `[r,c]` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "add_row")?;
        let row_shape = self.nodes[row.0].shape.clone();
        if row_shape != [c] {
            return Err(Error::shape(
                "add_row",
                format!("matrix is [{r}, {c}] but row vector has shape {row_shape:?}"),
            ));
        }
        let mut out = self.nodes[x.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += self.nodes[row.0].data[j];
            }
        }
        let id = self.out_node(vec![r, c], out, &[x, row]);
        self.ops.push(Op::AddRow { x, row, out: id });
        Ok(id)
    }

    /// Hadamard product of two same-shape nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let id = self.out_node(shape, out, &[a, b]);
        self.ops.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    /// Multiplication by a host-side constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = S::of_f64(c);
        let out: Vec<S> = self.nodes[x.0].data.iter().map(|v| *v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let id = self.out_node(shape, out, &[x]);
        self.ops.push(Op::Scale { x, c, out: id });
        id
    }

    /// `a - b`, composed from `scale` and `add`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Row-wise softmax over the last dimension (rank ≥ 1).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let Some(&cols) = shape.last() else {
            return Err(Error::shape("softmax", "expected rank ≥ 1, got a scalar".to_string()));
        };
        if cols == 0 {
            return Err(Error::shape("softmax", format!("last dim is 0 in shape {shape:?}")));
        }
        let src = &self.nodes[x.0].data;
        let rows = src.len() / cols;
        let mut out = vec![S::zero(); src.len()];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let m = row.iter().fold(row[0], |acc, v| acc.max(*v));
            let mut denom = S::zero();
            for j in 0..cols {
                let e = (row[j] - m).exp();
                out[i * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                out[i * cols + j] = out[i * cols + j] / denom;
            }
        }
        let id = self.out_node(shape, out, &[x]);
        self.ops.push(Op::Softmax { x, out: id });
        Ok(id)
    }

    /// Row-wise layer normalization of an `[r,d]` matrix with a learned
    /// element-wise affine (`gamma`, `beta` of shape `[d]`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, d) = self.dims2(x, "layer_norm")?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[id.0].shape;
            if s.as_slice() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} has shape {s:?}, expected [{d}]"),
                ));
            }
        }
        let eps = S::of_f64(eps);
        let mut out = vec![S::zero(); r * d];
        let inv_d = S::of_f64(1.0 / d as f64);
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() * inv_d;
            let inv_sigma = S::one() / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_sigma;
                out[i * d + j] = xhat * self.nodes[gamma.0].data[j] + self.nodes[beta.0].data[j];
            }
        }
        let id = self.out_node(vec![r, d], out, &[x, gamma, beta]);
        self.ops.push(Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
            out: id,
        });
        Ok(id)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<S> = self.nodes[x.0].data.iter().map(|v| gelu_fwd(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let id = self.out_node(shape, out, &[x]);
        self.ops.push(Op::Gelu { x, out: id });
        id
    }

    /// Gathers rows of a `[v,d]` table by token id → `[ids.len(), d]`.
    pub fn embed_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "embed_lookup")?;
        if let Some(bad) = ids.iter().find(|i| **i as usize >= v) {
            return Err(Error::IndexOutOfRange {
                what: "embedding table",
                index: *bad as usize,
                len: v,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &t in ids {
            out.extend_from_slice(&self.nodes[table.0].data[t as usize * d..(t as usize + 1) * d]);
        }
        let id = self.out_node(vec![ids.len(), d], out, &[table]);
        self.ops.push(Op::EmbedLookup {
            table,
            ids: Arc::from(ids),
            out: id,
        });
        Ok(id)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows parts"));
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for p in parts {
            let (r, pc) = self.dims2(*p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts differ: {c} vs {pc}"),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let id = self.out_node(vec![rows, c], out, parts);
        self.ops.push(Op::ConcatRows {
            parts: parts.to_vec(),
            out: id,
        });
        Ok(id)
    }

    /// Rows `start..start+len` of an `[r,c]` matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of range for [{r}, {c}]", start + len),
            ));
        }
        let out = self.nodes[x.0].data[start * c..(start + len) * c].to_vec();
        let id = self.out_node(vec![len, c], out, &[x]);
        self.ops.push(Op::SliceRows { x, start, out: id });
        Ok(id)
    }

    /// Reinterprets a node under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot view {:?} ({} elements) as {shape:?} ({n} elements)",
                    self.nodes[x.0].shape,
                    self.nodes[x.0].data.len()
                ),
            ));
        }
        let out = self.nodes[x.0].data.clone();
        let id = self.out_node(shape, out, &[x]);
        self.ops.push(Op::Reshape { x, out: id });
        Ok(id)
    }

    /// Clamps every element into `[lo, hi]`. The gradient passes through
    /// exactly where `lo ≤ x ≤ hi` and is zero elsewhere.
    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::shape("clip", format!("invalid interval [{lo}, {hi}]")));
        }
        let (lo, hi) = (S::of_f64(lo), S::of_f64(hi));
        let out: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|v| (*v).max(lo).min(hi))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let id = self.out_node(shape, out, &[x]);
        self.ops.push(Op::Clip { x, lo, hi, out: id });
        Ok(id)
    }

    /// Arbitrary flat-index gather: `out[i] = x[idx[i]]`, viewed under
    /// `out_shape`. Covers patch extraction and channel (de)interleaving.
    pub fn gather(&mut self, x: NodeId, idx: Arc<[u32]>, out_shape: Vec<usize>) -> Result<NodeId> {
        let n = self.nodes[x.0].data.len();
        if let Some(bad) = idx.iter().find(|i| **i as usize >= n) {
            return Err(Error::IndexOutOfRange {
                what: "gather source",
                index: *bad as usize,
                len: n,
            });
        }
        let expected: usize = out_shape.iter().product();
        if expected != idx.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices cannot fill shape {out_shape:?}", idx.len()),
            ));
        }
        let out: Vec<S> = idx.iter().map(|i| self.nodes[x.0].data[*i as usize]).collect();
        let id = self.out_node(out_shape, out, &[x]);
        self.ops.push(Op::Gather { x, idx, out: id });
        Ok(id)
    }

    /// Mean token-level cross-entropy between `[r,v]` logits and `r` target
    /// ids, with a numerically stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let (r, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} logit rows but {} targets", targets.len()),
            ));
        }
        if r == 0 {
            return Err(Error::Empty("cross_entropy targets"));
        }
        if let Some(bad) = targets.iter().find(|t| **t as usize >= v) {
            return Err(Error::IndexOutOfRange {
                what: "logit columns",
                index: *bad as usize,
                len: v,
            });
        }
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &self.nodes[logits.0].data[i * v..(i + 1) * v];
            let m = row.iter().fold(row[0], |acc, x| acc.max(*x));
            let mut denom = S::zero();
            for x in row {
                denom += (*x - m).exp();
            }
            let lse = m + denom.ln();
            total += lse - row[t as usize];
        }
        let mean = total * S::of_f64(1.0 / r as f64);
        let id = self.out_node(vec![], vec![mean], &[logits]);
        self.ops.push(Op::CrossEntropy {
            logits,
            targets: Arc::from(targets),
            out: id,
        });
        Ok(id)
    }

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.nodes[x.0].data.iter().copied().sum::<S>();
        let id = self.out_node(vec![], vec![total], &[x]);
        self.ops.push(Op::Sum { x, out: id });
        id
    }

    /// Mean of all elements → scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].data.len();
        if n == 0 {
            return Err(Error::Empty("mean input"));
        }
        let s = self.sum(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                op,
                format!(
                    "operand shapes differ: {:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            ));
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Accumulates `d loss / d node` for every node the scalar `loss`
    /// depends on; ops replay in reverse recording order.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<S>> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for op in self.ops.iter().rev() {
            self.replay(op, &mut grads);
        }

        // Deny gradients on nodes that never asked for them (constants can
        // pick up intermediate gradients as matmul partners).
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad && i != loss.0 {
                *g = None;
            }
        }

        Ok(GradMap {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    /// Adds `v` into the gradient buffer of `id`, allocating on first use.
    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: NodeId, v: impl Iterator<Item = S>) {
        let buf = grads[id.0].get_or_insert_with(|| vec![S::zero(); self.nodes[id.0].data.len()]);
        for (slot, add) in buf.iter_mut().zip(v) {
            *slot += add;
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<S>>], id: NodeId) -> &'a mut Vec<S> {
        grads[id.0].get_or_insert_with(|| vec![S::zero(); self.nodes[id.0].data.len()])
    }

    fn replay(&self, op: &Op<S>, grads: &mut [Option<Vec<S>>]) {
        // Every node has one producer, and consumers replay before it, so
        // the output gradient is final here and can be moved out.
        let out_id = match op {
            Op::Matmul { out, .. }
            | Op::Transpose { out, .. }
            | Op::Add { out, .. }
            | Op::AddRow { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Softmax { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Gelu { out, .. }
            | Op::EmbedLookup { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::SliceRows { out, .. }
            | Op::Reshape { out, .. }
            | Op::Clip { out, .. }
            | Op::Gather { out, .. }
            | Op::CrossEntropy { out, .. }
            | Op::Sum { out, .. } => *out,
        };
        let Some(go) = grads[out_id.0].take() else {
            return;
        };

        match op {
            Op::Matmul { a, b, out: _ } => {
                let (m, k) = two_dims(&self.nodes[a.0].shape);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    // dA += dC · Bᵀ, expressed with swapped strides on B.
                    let da = self.grad_buf(grads, *a);
                    S::gemm(
                        m,
                        n,
                        k,
                        &go,
                        n as isize,
                        1,
                        &self.nodes[b.0].data,
                        1,
                        n as isize,
                        S::one(),
                        da,
                        k as isize,
                        1,
                    );
                }
                if self.nodes[b.0].needs_grad {
                    // dB += Aᵀ · dC.
                    let db = self.grad_buf(grads, *b);
                    S::gemm(
                        k,
                        m,
                        n,
                        &self.nodes[a.0].data,
                        1,
                        k as isize,
                        &go,
                        n as isize,
                        1,
                        S::one(),
                        db,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Transpose { x, out } => {
                if self.nodes[x.0].needs_grad {
                    let (c, r) = two_dims(&self.nodes[out.0].shape);
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..c {
                        for j in 0..r {
                            dx[j * c + i] += go[i * r + j];
                        }
                    }
                }
            }
            Op::Add { a, b, out: _ } => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, go.iter().copied());
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, go.iter().copied());
                }
            }
            Op::AddRow { x, row, out: _ } => {
                if self.nodes[x.0].needs_grad {
                    self.accumulate(grads, *x, go.iter().copied());
                }
                if self.nodes[row.0].needs_grad {
                    let c = self.nodes[row.0].data.len();
                    let dr = self.grad_buf(grads, *row);
                    for (i, g) in go.iter().enumerate() {
                        dr[i % c] += *g;
                    }
                }
            }
            Op::Mul { a, b, out: _ } => {
                if self.nodes[a.0].needs_grad {
                    let bd = &self.nodes[b.0].data;
                    self.accumulate(grads, *a, go.iter().zip(bd).map(|(g, v)| *g * *v));
                }
                if self.nodes[b.0].needs_grad {
                    let ad = &self.nodes[a.0].data;
                    self.accumulate(grads, *b, go.iter().zip(ad).map(|(g, v)| *g * *v));
                }
            }
            Op::Scale { x, c, out: _ } => {
                if self.nodes[x.0].needs_grad {
                    let c = *c;
                    self.accumulate(grads, *x, go.iter().map(|g| *g * c));
                }
            }
            Op::Softmax { x, out } => {
                if self.nodes[x.0].needs_grad {
                    let y = &self.nodes[out.0].data;
                    let cols = *self.nodes[out.0].shape.last().expect("softmax out has rank ≥ 1");
                    let rows = y.len() / cols;
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..rows {
                        let mut dot = S::zero();
                        for j in 0..cols {
                            dot += go[i * cols + j] * y[i * cols + j];
                        }
                        for j in 0..cols {
                            let idx = i * cols + j;
                            dx[idx] += y[idx] * (go[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
                out: _,
            } => {
                let (r, d) = two_dims(&self.nodes[x.0].shape);
                let inv_d = S::of_f64(1.0 / d as f64);
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                for i in 0..r {
                    let row = &xd[i * d..(i + 1) * d];
                    let gout = &go[i * d..(i + 1) * d];
                    let mean = row.iter().copied().sum::<S>() * inv_d;
                    let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() * inv_d;
                    let inv_sigma = S::one() / (var + *eps).sqrt();
                    if self.nodes[x.0].needs_grad {
                        // dx = (u − mean(u) − x̂·mean(u⊙x̂)) / σ with u = dy⊙γ.
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_sigma;
                            let u = gout[j] * gd[j];
                            m1 += u;
                            m2 += u * xhat;
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let dx = self.grad_buf(grads, *x);
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_sigma;
                            let u = gout[j] * gd[j];
                            dx[i * d + j] += inv_sigma * (u - m1 - xhat * m2);
                        }
                    }
                    if self.nodes[gamma.0].needs_grad {
                        let dg = self.grad_buf(grads, *gamma);
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_sigma;
                            dg[j] += gout[j] * xhat;
                        }
                    }
                    if self.nodes[beta.0].needs_grad {
                        let db = self.grad_buf(grads, *beta);
                        for j in 0..d {
                            db[j] += gout[j];
                        }
                    }
                }
            }
            Op::Gelu { x, out: _ } => {
                if self.nodes[x.0].needs_grad {
                    let xd = &self.nodes[x.0].data;
                    self.accumulate(grads, *x, go.iter().zip(xd).map(|(g, v)| *g * gelu_bwd(*v)));
                }
            }
            Op::EmbedLookup { table, ids, out: _ } => {
                if self.nodes[table.0].needs_grad {
                    let d = self.nodes[table.0].shape[1];
                    let dt = self.grad_buf(grads, *table);
                    for (i, &t) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[t as usize * d + j] += go[i * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts, out: _ } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, *p, go[offset..offset + len].iter().copied());
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start, out } => {
                if self.nodes[x.0].needs_grad {
                    let (_, c) = two_dims(&self.nodes[x.0].shape);
                    let rows = self.nodes[out.0].shape[0];
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..rows {
                        for j in 0..c {
                            dx[(start + i) * c + j] += go[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape { x, out: _ } => {
                if self.nodes[x.0].needs_grad {
                    self.accumulate(grads, *x, go.iter().copied());
                }
            }
            Op::Clip { x, lo, hi, out: _ } => {
                if self.nodes[x.0].needs_grad {
                    let xd = &self.nodes[x.0].data;
                    let (lo, hi) = (*lo, *hi);
                    self.accumulate(
                        grads,
                        *x,
                        go.iter().zip(xd).map(|(g, v)| {
                            if *v >= lo && *v <= hi {
                                *g
                            } else {
                                S::zero()
                            }
                        }),
                    );
                }
            }
            Op::Gather { x, idx, out: _ } => {
                if self.nodes[x.0].needs_grad {
                    let dx = self.grad_buf(grads, *x);
                    for (i, &src) in idx.iter().enumerate() {
                        dx[src as usize] += go[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                out: _,
            } => {
                if self.nodes[logits.0].needs_grad {
                    let (r, v) = two_dims(&self.nodes[logits.0].shape);
                    let scale = go[0] * S::of_f64(1.0 / r as f64);
                    let ld = &self.nodes[logits.0].data;
                    let dl = self.grad_buf(grads, *logits);
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &ld[i * v..(i + 1) * v];
                        let m = row.iter().fold(row[0], |acc, x| acc.max(*x));
                        let mut denom = S::zero();
                        for x in row {
                            denom += (*x - m).exp();
                        }
                        for j in 0..v {
                            let p = (row[j] - m).exp() / denom;
                            let indicator = if j == t as usize { S::one() } else { S::zero() };
                            dl[i * v + j] += scale * (p - indicator);
                        }
                    }
                }
            }
            Op::Sum { x, out: _ } => {
                if self.nodes[x.0].needs_grad {
                    let g = go[0];
                    self.accumulate(grads, *x, std::iter::repeat(g));
                }
            }
        }
    }
}

fn two_dims(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let k = S::of_f64(GELU_K);
    let c = S::of_f64(GELU_C);
    let half = S::of_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let k = S::of_f64(GELU_K);
    let c = S::of_f64(GELU_C);
    let half = S::of_f64(0.5);
    let three = S::of_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + three * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf64(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        tape.leaf(&Tensor::new(shape, data).unwrap().requires_grad(true))
    }

    #[test]
    fn matmul_forward_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        let a = leaf64(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf64(&mut tape, vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch_by_name() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        // loss = sum(A·B) ⇒ dA = 1·Bᵀ (row sums of B per column), dB = Aᵀ·1.
        let mut tape = Tape::<f64>::new();
        let a = leaf64(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf64(&mut tape, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_orthogonal_to_ones() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2, 3], vec![0.1, 1.5, -0.7, 3.0, 3.0, 3.0]);
        let y = tape.softmax(x).unwrap();
        for i in 0..2 {
            let s: f64 = tape.data(y)[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Uniform row stays uniform.
        assert!((tape.data(y)[3] - 1.0 / 3.0).abs() < 1e-12);
        // d(sum softmax)/dx = 0 because rows always sum to 1.
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        for g in grads.get(x).unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_magnitude_mask_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::new(vec![1, 3], vec![5.0, -1e9, 4.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let d = tape.data(y);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(d[1] == 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_log_softmax_by_hand() {
        let mut tape = Tape::<f64>::new();
        let logits = leaf64(&mut tape, vec![1, 3], vec![2.0, 1.0, 0.0]);
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        let z: f64 = (0.0f64).exp() + (-1.0f64).exp() + (-2.0f64).exp();
        assert!((tape.scalar(loss).unwrap() - z.ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        // softmax − one-hot.
        let p0 = 1.0 / z;
        assert!((g[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(&Tensor::zeros(vec![2, 5]));
        let err = tape.cross_entropy(logits, &[1, 5]).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn clip_clamps_and_blocks_gradient_outside_range() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![4], vec![-2.0, 0.25, 0.5, 3.0]);
        let y = tape.clip(x, 0.0, 1.0).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.25, 0.5, 1.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates_gradient_from_both_consumers() {
        // loss = sum(x⊙x) + sum(x) ⇒ dx = 2x + 1.
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![3], vec![1.0, -2.0, 0.5]);
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum(sq);
        let s2 = tape.sum(x);
        let total = tape.add(s1, s2).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, 2.0]);
        let c = tape.constant(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::<f32>::zeros(vec![2, 2]).requires_grad(true));
        match tape.backward(x) {
            Err(Error::NonScalarLoss(shape)) => assert_eq!(shape, vec![2, 2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn embed_lookup_gathers_rows_and_scatters_gradients() {
        let mut tape = Tape::<f64>::new();
        let table = leaf64(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let e = tape.embed_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.data(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(e);
        let grads = tape.backward(loss).unwrap();
        // Row 2 used twice, row 0 once, row 1 never.
        assert_eq!(grads.get(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_then_slice_round_trips_values_and_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = leaf64(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf64(&mut tape, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat), &[3, 2]);
        let mid = tape.slice_rows(cat, 1, 1).unwrap();
        assert_eq!(tape.data(mid), &[3.0, 4.0]);
        let loss = tape.sum(mid);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).is_none() || grads.get(a).unwrap() == &[0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_backward_scatter_adds_duplicate_indices() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![4], vec![10.0, 20.0, 30.0, 40.0]);
        let g = tape.gather(x, Arc::from(&[1u32, 1, 3][..]), vec![3]).unwrap();
        assert_eq!(tape.data(g), &[20.0, 20.0, 40.0]);
        let loss = tape.sum(g);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn layer_norm_output_is_normalized_per_row() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let g = tape.constant(&Tensor::full(vec![4], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for i in 0..2 {
            let row = &tape.data(y)[i * 4..(i + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gelu_matches_reference_values() {
        // Reference values from the tanh approximation evaluated in f64.
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.gelu(x);
        let d = tape.data(y);
        assert!((d[0] - (-0.158_808_009_391_723_24)).abs() < 1e-10);
        assert_eq!(d[1], 0.0);
        assert!((d[2] - 1.954_597_694_087_775).abs() < 1e-9);
    }

    #[test]
    fn transpose_round_trips_and_routes_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let xt = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(xt), &[3, 2]);
        assert_eq!(tape.data(xt), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let w = tape.constant(&Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let prod = tape.mul(xt, w).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn add_row_broadcasts_and_reduces_gradient_columnwise() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let r = leaf64(&mut tape, vec![2], vec![10.0, 20.0]);
        let y = tape.add_row(x, r).unwrap();
        assert_eq!(tape.data(y), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(r).unwrap(), &[2.0, 2.0]);
    }
}
