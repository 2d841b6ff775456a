//! Recorded-operation reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node
//! holding the forward value, references to its operands, and the saved
//! state its backward rule needs. Operand ids always precede the node that
//! uses them, so insertion order is a topological order and the backward
//! pass is a single reverse sweep that visits each node at most once.
//!
//! The graph is rebuilt for every forward pass. Calling [`Graph::backward`]
//! twice on the same graph accumulates gradients (they are not reset
//! between calls).

use crate::optim::ParamStore;
use crate::tensor::{Tensor, TensorError};

/// Index of a node on the tape.
pub type NodeId = usize;

/// Variance epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
    Sum,
}

#[derive(Debug, Clone)]
enum Rule {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Relu {
        x: NodeId,
    },
    /// Saved output lives in the node's own data.
    Softmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ReducePool {
        x: NodeId,
        axis: usize,
        mode: PoolMode,
        /// Flat input index of the winner per output element (max mode only).
        argmax: Vec<usize>,
    },
    Transpose {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    StackRows {
        parts: Vec<NodeId>,
    },
    EmbedRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    SumAll {
        x: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    param_slot: Option<usize>,
    rule: Rule,
}

fn accumulate(node: &mut Node, delta: &[f64]) {
    let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
    debug_assert_eq!(grad.len(), delta.len());
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += d;
    }
}

/// Append-only computation tape. See the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// New graph whose first `store.len()` nodes are the parameters, in
    /// store order: the node id of parameter `i` is exactly `i`.
    pub fn from_params(store: &ParamStore) -> Self {
        let mut g = Graph::new();
        for (slot, param) in store.iter().enumerate() {
            let t = &param.tensor;
            g.nodes.push(Node {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
                grad: None,
                needs_grad: t.requires_grad,
                param_slot: Some(slot),
                rule: Rule::Leaf,
            });
        }
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let needs = tensor.requires_grad;
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Rule::Leaf, needs)
    }

    /// Non-learnable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, rule: Rule, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            param_slot: None,
            rule,
        });
        id
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn require_rank(&self, op: &'static str, id: NodeId, rank: usize) -> Result<(), TensorError> {
        if self.nodes[id].shape.len() != rank {
            return Err(TensorError::RankMismatch {
                op,
                expected: rank,
                shape: self.nodes[id].shape.clone(),
            });
        }
        Ok(())
    }

    fn require_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::DimMismatch {
                op,
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    // ── Forward operations ───────────────────────────────────────────

    /// Standard matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.require_rank("matmul", a, 2)?;
        self.require_rank("matmul", b, 2)?;
        let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
        let (k2, n) = (self.nodes[b].shape[0], self.nodes[b].shape[1]);
        if k != k2 {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let ad = &self.nodes[a].data;
        let bd = &self.nodes[b].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &bd[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (o, bv) in dst.iter_mut().zip(row) {
                    *o += av * bv;
                }
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Rule::Matmul { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.require_same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.nodes[a].shape.clone(), data, Rule::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.require_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.nodes[a].shape.clone(), data, Rule::Sub { a, b }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.require_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.nodes[a].shape.clone(), data, Rule::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v * factor).collect();
        let needs = self.nodes[x].needs_grad;
        self.push(self.nodes[x].shape.clone(), data, Rule::Scale { x, factor }, needs)
    }

    /// Adds a rank-1 bias along the last dimension — the only broadcast
    /// this graph supports.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        self.require_rank("add_bias", bias, 1)?;
        let d = self.nodes[bias].shape[0];
        let last = *self.nodes[x].shape.last().expect("shapes are non-empty");
        if last != d {
            return Err(TensorError::DimMismatch {
                op: "add_bias",
                left: self.nodes[x].shape.clone(),
                right: self.nodes[bias].shape.clone(),
            });
        }
        let bd = &self.nodes[bias].data;
        let data: Vec<f64> = self.nodes[x]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % d])
            .collect();
        let needs = self.needs(&[x, bias]);
        Ok(self.push(self.nodes[x].shape.clone(), data, Rule::AddBias { x, bias }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v.max(0.0)).collect();
        let needs = self.nodes[x].needs_grad;
        self.push(self.nodes[x].shape.clone(), data, Rule::Relu { x }, needs)
    }

    /// Softmax over the last dimension, computed with max-subtraction so
    /// inputs of any finite magnitude normalize cleanly. NaN inputs
    /// propagate to NaN outputs.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        let d = *shape.last().expect("shapes are non-empty");
        let xd = &self.nodes[x].data;
        let mut out = vec![0.0; xd.len()];
        for s in 0..xd.len() / d {
            let src = &xd[s * d..(s + 1) * d];
            let m = src.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let dst = &mut out[s * d..(s + 1) * d];
            let mut sum = 0.0;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in dst.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.nodes[x].needs_grad;
        self.push(shape, out, Rule::Softmax { x }, needs)
    }

    /// Normalizes each last-dimension slice to mean 0 / variance 1
    /// (epsilon [`LAYER_NORM_EPS`]), then applies the learnable affine.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        self.require_rank("layer_norm", gain, 1)?;
        self.require_rank("layer_norm", bias, 1)?;
        let shape = self.nodes[x].shape.clone();
        let d = *shape.last().expect("shapes are non-empty");
        if self.nodes[gain].shape[0] != d || self.nodes[bias].shape[0] != d {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                left: shape,
                right: vec![self.nodes[gain].shape[0], self.nodes[bias].shape[0]],
            });
        }
        let xd = &self.nodes[x].data;
        let gd = &self.nodes[gain].data;
        let bd = &self.nodes[bias].data;
        let slices = xd.len() / d;
        let mut normalized = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; slices];
        let mut out = vec![0.0; xd.len()];
        for s in 0..slices {
            let src = &xd[s * d..(s + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[s] = is;
            for j in 0..d {
                let nj = (src[j] - mean) * is;
                normalized[s * d + j] = nj;
                out[s * d + j] = gd[j] * nj + bd[j];
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(
            shape,
            out,
            Rule::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Removes `axis` by pooling over it. Max pooling records its argmax
    /// (lowest index on ties) so the backward pass routes gradient only to
    /// the winners. Pooling the last remaining axis yields shape `[1]`.
    pub fn reduce_pool(&mut self, x: NodeId, axis: usize, mode: PoolMode) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let an = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xd = &self.nodes[x].data;
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Sum | PoolMode::Mean => {
                for o in 0..outer {
                    for i in 0..inner {
                        let mut s = 0.0;
                        for k in 0..an {
                            s += xd[(o * an + k) * inner + i];
                        }
                        out[o * inner + i] = s;
                    }
                }
                if mode == PoolMode::Mean {
                    for v in out.iter_mut() {
                        *v /= an as f64;
                    }
                }
            }
            PoolMode::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = (o * an) * inner + i;
                        for k in 0..an {
                            let idx = (o * an + k) * inner + i;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_idx;
                    }
                }
            }
        }
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(out_shape, out, Rule::ReducePool { x, axis, mode, argmax }, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.require_rank("transpose", x, 2)?;
        let (m, n) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        let xd = &self.nodes[x].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(vec![n, m], out, Rule::Transpose { x }, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let to_elems: usize = shape.iter().product();
        let from_elems = self.nodes[x].data.len();
        if to_elems != from_elems {
            return Err(TensorError::ReshapeMismatch {
                from: self.nodes[x].shape.clone(),
                from_elems,
                to: shape,
                to_elems,
            });
        }
        let data = self.nodes[x].data.clone();
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(shape, data, Rule::Reshape { x }, needs))
    }

    /// Columns `start..start+len` of a rank-2 node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        self.require_rank("slice_cols", x, 2)?;
        let (m, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        if len == 0 || start + len > c {
            return Err(TensorError::ColSliceOutOfRange {
                start,
                end: start + len,
                cols: c,
            });
        }
        let xd = &self.nodes[x].data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(vec![m, len], out, Rule::SliceCols { x, start, len }, needs))
    }

    /// Concatenates rank-2 nodes with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyOperands { op: "concat_cols" });
        }
        for &p in parts {
            self.require_rank("concat_cols", p, 2)?;
        }
        let m = self.nodes[parts[0]].shape[0];
        for &p in parts {
            if self.nodes[p].shape[0] != m {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0]].shape.clone(),
                    right: self.nodes[p].shape.clone(),
                });
            }
        }
        let total_c: usize = parts.iter().map(|&p| self.nodes[p].shape[1]).sum();
        let mut out = Vec::with_capacity(m * total_c);
        for i in 0..m {
            for &p in parts {
                let c = self.nodes[p].shape[1];
                out.extend_from_slice(&self.nodes[p].data[i * c..(i + 1) * c]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(vec![m, total_c], out, Rule::ConcatCols { parts: parts.to_vec() }, needs))
    }

    /// Stacks rank-1 nodes of equal length into a rank-2 node, one per row.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyOperands { op: "stack_rows" });
        }
        for &p in parts {
            self.require_rank("stack_rows", p, 1)?;
        }
        let h = self.nodes[parts[0]].shape[0];
        for &p in parts {
            if self.nodes[p].shape[0] != h {
                return Err(TensorError::DimMismatch {
                    op: "stack_rows",
                    left: self.nodes[parts[0]].shape.clone(),
                    right: self.nodes[p].shape.clone(),
                });
            }
        }
        let mut out = Vec::with_capacity(parts.len() * h);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p].data);
        }
        let needs = self.needs(parts);
        Ok(self.push(vec![parts.len(), h], out, Rule::StackRows { parts: parts.to_vec() }, needs))
    }

    /// Gathers rows of a rank-2 table; backward scatter-adds into the table.
    pub fn embed_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        self.require_rank("embed_rows", table, 2)?;
        if indices.is_empty() {
            return Err(TensorError::EmptyOperands { op: "embed_rows" });
        }
        let (rows, h) = (self.nodes[table].shape[0], self.nodes[table].shape[1]);
        for &idx in indices {
            if idx >= rows {
                return Err(TensorError::RowOutOfRange { index: idx, rows });
            }
        }
        let td = &self.nodes[table].data;
        let mut out = Vec::with_capacity(indices.len() * h);
        for &idx in indices {
            out.extend_from_slice(&td[idx * h..(idx + 1) * h]);
        }
        let needs = self.nodes[table].needs_grad;
        Ok(self.push(
            vec![indices.len(), h],
            out,
            Rule::EmbedRows {
                table,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of all elements, as a shape-`[1]` node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].data.iter().sum();
        let needs = self.nodes[x].needs_grad;
        self.push(vec![1], vec![s], Rule::SumAll { x }, needs)
    }

    // ── Backward pass ────────────────────────────────────────────────

    /// Reverse sweep from `loss` (a one-element node) toward the leaves.
    /// Populates the gradient of every grad-requiring node reachable from
    /// the loss. Each call seeds a fresh unit gradient at the loss, so
    /// repeated calls accumulate into the stored gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss].shape.clone()));
        }
        // Per-call gradient buffers; merged into the persistent node
        // gradients at the end so repeated calls add up instead of
        // compounding through stale intermediate gradients.
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss] = Some(vec![1.0]);
        let nodes = &self.nodes;

        fn add_to(scratch: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, delta: &[f64]) {
            if !nodes[id].needs_grad {
                return;
            }
            let g = scratch[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
            debug_assert_eq!(g.len(), delta.len());
            for (gv, dv) in g.iter_mut().zip(delta) {
                *gv += dv;
            }
        }

        for id in (0..=loss).rev() {
            let node = &nodes[id];
            if matches!(node.rule, Rule::Leaf) {
                continue;
            }
            let grad = match scratch[id].take() {
                Some(g) => g,
                None => continue,
            };
            let grad = grad.as_slice();
            match &node.rule {
                Rule::Leaf => unreachable!(),
                Rule::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let n = nodes[b].shape[1];
                    if nodes[a].needs_grad {
                        let mut da = vec![0.0; m * k];
                        let bd = &nodes[b].data;
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grad[i * n + j] * bd[p * n + j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        add_to(&mut scratch, nodes, a, &da);
                    }
                    if nodes[b].needs_grad {
                        let mut db = vec![0.0; k * n];
                        let ad = &nodes[a].data;
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += ad[i * k + p] * grad[i * n + j];
                                }
                                db[p * n + j] = s;
                            }
                        }
                        add_to(&mut scratch, nodes, b, &db);
                    }
                }
                Rule::Add { a, b } => {
                    add_to(&mut scratch, nodes, *a, grad);
                    add_to(&mut scratch, nodes, *b, grad);
                }
                Rule::Sub { a, b } => {
                    add_to(&mut scratch, nodes, *a, grad);
                    if nodes[*b].needs_grad {
                        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                        add_to(&mut scratch, nodes, *b, &neg);
                    }
                }
                Rule::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if nodes[a].needs_grad {
                        let da: Vec<f64> = grad.iter().zip(&nodes[b].data).map(|(g, v)| g * v).collect();
                        add_to(&mut scratch, nodes, a, &da);
                    }
                    if nodes[b].needs_grad {
                        let db: Vec<f64> = grad.iter().zip(&nodes[a].data).map(|(g, v)| g * v).collect();
                        add_to(&mut scratch, nodes, b, &db);
                    }
                }
                Rule::Scale { x, factor } => {
                    if nodes[*x].needs_grad {
                        let dx: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                        add_to(&mut scratch, nodes, *x, &dx);
                    }
                }
                Rule::AddBias { x, bias } => {
                    add_to(&mut scratch, nodes, *x, grad);
                    if nodes[*bias].needs_grad {
                        let d = nodes[*bias].data.len();
                        let mut db = vec![0.0; d];
                        for (i, g) in grad.iter().enumerate() {
                            db[i % d] += g;
                        }
                        add_to(&mut scratch, nodes, *bias, &db);
                    }
                }
                Rule::Relu { x } => {
                    if nodes[*x].needs_grad {
                        let dx: Vec<f64> = grad
                            .iter()
                            .zip(&nodes[*x].data)
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect();
                        add_to(&mut scratch, nodes, *x, &dx);
                    }
                }
                Rule::Softmax { x } => {
                    if nodes[*x].needs_grad {
                        let d = *node.shape.last().expect("shapes are non-empty");
                        let y = &node.data;
                        let mut dx = vec![0.0; y.len()];
                        for s in 0..y.len() / d {
                            let ys = &y[s * d..(s + 1) * d];
                            let gs = &grad[s * d..(s + 1) * d];
                            let dot: f64 = ys.iter().zip(gs).map(|(yv, gv)| yv * gv).sum();
                            for j in 0..d {
                                dx[s * d + j] = ys[j] * (gs[j] - dot);
                            }
                        }
                        add_to(&mut scratch, nodes, *x, &dx);
                    }
                }
                Rule::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let d = *node.shape.last().expect("shapes are non-empty");
                    let slices = node.data.len() / d;
                    if nodes[bias].needs_grad {
                        let mut db = vec![0.0; d];
                        for s in 0..slices {
                            for j in 0..d {
                                db[j] += grad[s * d + j];
                            }
                        }
                        add_to(&mut scratch, nodes, bias, &db);
                    }
                    if nodes[gain].needs_grad {
                        let mut dg = vec![0.0; d];
                        for s in 0..slices {
                            for j in 0..d {
                                dg[j] += grad[s * d + j] * normalized[s * d + j];
                            }
                        }
                        add_to(&mut scratch, nodes, gain, &dg);
                    }
                    if nodes[x].needs_grad {
                        let gd = &nodes[gain].data;
                        let mut dx = vec![0.0; node.data.len()];
                        for s in 0..slices {
                            let mut mean_dn = 0.0;
                            let mut mean_dn_n = 0.0;
                            for j in 0..d {
                                let dn = grad[s * d + j] * gd[j];
                                mean_dn += dn;
                                mean_dn_n += dn * normalized[s * d + j];
                            }
                            mean_dn /= d as f64;
                            mean_dn_n /= d as f64;
                            for j in 0..d {
                                let dn = grad[s * d + j] * gd[j];
                                dx[s * d + j] =
                                    inv_std[s] * (dn - mean_dn - normalized[s * d + j] * mean_dn_n);
                            }
                        }
                        add_to(&mut scratch, nodes, x, &dx);
                    }
                }
                Rule::ReducePool { x, axis, mode, argmax } => {
                    let (x, axis, mode) = (*x, *axis, *mode);
                    if nodes[x].needs_grad {
                        let shape = &nodes[x].shape;
                        let outer: usize = shape[..axis].iter().product();
                        let an = shape[axis];
                        let inner: usize = shape[axis + 1..].iter().product();
                        let mut dx = vec![0.0; nodes[x].data.len()];
                        match mode {
                            PoolMode::Sum => {
                                for o in 0..outer {
                                    for i in 0..inner {
                                        let g = grad[o * inner + i];
                                        for k in 0..an {
                                            dx[(o * an + k) * inner + i] += g;
                                        }
                                    }
                                }
                            }
                            PoolMode::Mean => {
                                for o in 0..outer {
                                    for i in 0..inner {
                                        let g = grad[o * inner + i] / an as f64;
                                        for k in 0..an {
                                            dx[(o * an + k) * inner + i] += g;
                                        }
                                    }
                                }
                            }
                            PoolMode::Max => {
                                for (out_idx, &src_idx) in argmax.iter().enumerate() {
                                    dx[src_idx] += grad[out_idx];
                                }
                            }
                        }
                        add_to(&mut scratch, nodes, x, &dx);
                    }
                }
                Rule::Transpose { x } => {
                    if nodes[*x].needs_grad {
                        let (n, m) = (node.shape[0], node.shape[1]);
                        let mut dx = vec![0.0; grad.len()];
                        for i in 0..n {
                            for j in 0..m {
                                dx[j * n + i] = grad[i * m + j];
                            }
                        }
                        add_to(&mut scratch, nodes, *x, &dx);
                    }
                }
                Rule::Reshape { x } => {
                    add_to(&mut scratch, nodes, *x, grad);
                }
                Rule::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    if nodes[x].needs_grad {
                        let c = nodes[x].shape[1];
                        let m = node.shape[0];
                        let mut dx = vec![0.0; nodes[x].data.len()];
                        for i in 0..m {
                            for j in 0..len {
                                dx[i * c + start + j] = grad[i * len + j];
                            }
                        }
                        add_to(&mut scratch, nodes, x, &dx);
                    }
                }
                Rule::ConcatCols { parts } => {
                    let m = node.shape[0];
                    let total_c = node.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = nodes[p].shape[1];
                        if nodes[p].needs_grad {
                            let mut dp = vec![0.0; nodes[p].data.len()];
                            for i in 0..m {
                                dp[i * c..(i + 1) * c]
                                    .copy_from_slice(&grad[i * total_c + offset..i * total_c + offset + c]);
                            }
                            add_to(&mut scratch, nodes, p, &dp);
                        }
                        offset += c;
                    }
                }
                Rule::StackRows { parts } => {
                    let h = node.shape[1];
                    for (row, &p) in parts.iter().enumerate() {
                        add_to(&mut scratch, nodes, p, &grad[row * h..(row + 1) * h]);
                    }
                }
                Rule::EmbedRows { table, indices } => {
                    let table = *table;
                    if nodes[table].needs_grad {
                        let h = node.shape[1];
                        let mut dt = vec![0.0; nodes[table].data.len()];
                        for (row, &idx) in indices.iter().enumerate() {
                            for j in 0..h {
                                dt[idx * h + j] += grad[row * h + j];
                            }
                        }
                        add_to(&mut scratch, nodes, table, &dt);
                    }
                }
                Rule::SumAll { x } => {
                    if nodes[*x].needs_grad {
                        let dx = vec![grad[0]; nodes[*x].data.len()];
                        add_to(&mut scratch, nodes, *x, &dx);
                    }
                }
            }
        }
        for (id, g) in scratch.into_iter().enumerate() {
            if let Some(g) = g {
                accumulate(&mut self.nodes[id], &g);
            }
        }
        Ok(())
    }

    /// Adds the gradient of every parameter leaf that received one into the
    /// persistent store, so per-sample graphs can accumulate a virtual batch.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(slot), Some(grad)) = (node.param_slot, node.grad.as_deref()) {
                store.get_mut(slot).tensor.accumulate_grad(grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        g.leaf(Tensor::new(shape, data).unwrap().with_requires_grad())
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = g.matmul(i2, m).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = g.softmax_lastdim(x);
        for v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(vec![2], vec![1000.0, 1000.0]).unwrap();
        let yb = g.softmax_lastdim(big);
        assert_eq!(g.data(yb), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = g.softmax_lastdim(x);
        // Brute-force exp/sum route, no max subtraction.
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, want) in g.data(y).iter().zip(exps.iter().map(|e| e / sum)) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitudes() {
        let mut g = Graph::new();
        let x = g
            .constant(vec![2, 3], vec![1e6, -1e6, 0.0, 523_431.7, 523_431.0, -4.0])
            .unwrap();
        let y = g.softmax_lastdim(x);
        let yd = g.data(y);
        for s in 0..2 {
            let sum: f64 = yd[s * 3..(s + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_propagates_nan() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![f64::NAN, 1.0]).unwrap();
        let y = g.softmax_lastdim(x);
        assert!(g.data(y).iter().any(|v| v.is_nan()));
    }

    #[test]
    fn layer_norm_constant_slice_collapses_to_bias() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![5.0, 5.0, 5.0]).unwrap();
        let gain = g.constant(vec![3], vec![1.0; 3]).unwrap();
        let bias = g.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        for v in g.data(y) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_element_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![1.0, 3.0]).unwrap();
        let gain = g.constant(vec![2], vec![1.0; 2]).unwrap();
        let bias = g.constant(vec![2], vec![0.0; 2]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        // mean 2, population variance 1 → (x - 2) / sqrt(1 + eps)
        let want = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        let yd = g.data(y);
        assert!((yd[0] + want).abs() < 1e-15);
        assert!((yd[1] - want).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_output_mean_is_zero_before_affine() {
        let mut g = Graph::new();
        let x = g
            .constant(vec![2, 4], vec![0.3, -1.2, 7.5, 2.2, -0.4, 0.0, 1.9, -3.3])
            .unwrap();
        let gain = g.constant(vec![4], vec![1.0; 4]).unwrap();
        let bias = g.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        let yd = g.data(y);
        for s in 0..2 {
            let mean: f64 = yd[s * 4..(s + 1) * 4].iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn reduce_pool_mean_over_rows() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = g.reduce_pool(x, 1, PoolMode::Mean).unwrap();
        assert_eq!(g.shape(y), &[2]);
        assert_eq!(g.data(y), &[2.0, 6.0]);
    }

    #[test]
    fn reduce_pool_max_single_element_axis_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 3], vec![4.0, -2.0, 0.5]).unwrap();
        let y = g.reduce_pool(x, 0, PoolMode::Max).unwrap();
        assert_eq!(g.data(y), &[4.0, -2.0, 0.5]);
    }

    #[test]
    fn reduce_pool_mean_equals_sum_over_size() {
        let mut g = Graph::new();
        let vals = vec![0.1, -2.7, 3.3, 9.9, -0.04, 5.5];
        let x = g.constant(vec![2, 3], vals).unwrap();
        let mean = g.reduce_pool(x, 1, PoolMode::Mean).unwrap();
        let sum = g.reduce_pool(x, 1, PoolMode::Sum).unwrap();
        for (m, s) in g.data(mean).iter().zip(g.data(sum)) {
            assert_eq!(m.to_bits(), (s / 3.0).to_bits());
        }
    }

    #[test]
    fn reduce_pool_axis_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            g.reduce_pool(x, 2, PoolMode::Sum),
            Err(TensorError::AxisOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, -1.0]);
        let s = g.sum_all(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_w() {
        let mut g = Graph::new();
        let vals = vec![1.0, -2.0, 0.5];
        let w = leaf(&mut g, vec![3], vals.clone());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        let grads = g.grad(w).unwrap();
        for (gv, v) in grads.iter().zip(&vals) {
            assert!((gv - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let s = g.sum_all(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            g.backward(w),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn max_pool_grad_routes_to_lowest_index_on_ties() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![2.0, 2.0, 1.0]);
        let m = g.reduce_pool(x, 0, PoolMode::Max).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_gradient_of_sum_matches_central_differences_tightly() {
        use crate::gradcheck;
        use crate::optim::{Init, ParamStore};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(512);
        let mut store = ParamStore::new();
        store.add("a", vec![3, 4], Init::Zeros, &mut rng);
        for v in store.get_mut(0).tensor.data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let b_data: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let forward = |s: &ParamStore| {
            let mut g = Graph::from_params(s);
            let b = g.constant(vec![4, 2], b_data.clone()).unwrap();
            let c = g.matmul(0, b).unwrap();
            let loss = g.sum_all(c);
            g.scalar_value(loss)
        };
        let mut g = Graph::from_params(&store);
        let b = g.constant(vec![4, 2], b_data.clone()).unwrap();
        let c = g.matmul(0, b).unwrap();
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut store);
        let (err, at) = gradcheck::max_rel_error(&store, forward, 1e-5);
        assert!(err < 1e-6, "max rel err {err} at {at}");
    }

    #[test]
    fn every_op_gradient_matches_finite_differences() {
        use crate::gradcheck;
        use crate::optim::{Init, ParamStore};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        // Each case: (name, builder) where the builder runs the op under
        // test on grad-requiring inputs and reduces to a scalar. Inputs are
        // uniform in [-2, 2] via Init::GlorotUniform bounds widened below.
        type Builder = fn(&mut Graph, &[usize]) -> NodeId;
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |g, p| {
                let y = g.matmul(p[0], p[1]).unwrap();
                g.sum_all(y)
            }),
            ("add", vec![vec![2, 3], vec![2, 3]], |g, p| {
                let y = g.add(p[0], p[1]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("sub_mul", vec![vec![5], vec![5]], |g, p| {
                let d = g.sub(p[0], p[1]).unwrap();
                let sq = g.mul(d, d).unwrap();
                g.sum_all(sq)
            }),
            ("scale", vec![vec![4]], |g, p| {
                let y = g.scale(p[0], -1.7);
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("add_bias", vec![vec![3, 2], vec![2]], |g, p| {
                let y = g.add_bias(p[0], p[1]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("relu", vec![vec![6]], |g, p| {
                let y = g.relu(p[0]);
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("softmax", vec![vec![2, 4]], |g, p| {
                let y = g.softmax_lastdim(p[0]);
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("layer_norm", vec![vec![2, 4], vec![4], vec![4]], |g, p| {
                let y = g.layer_norm(p[0], p[1], p[2]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("pool_mean", vec![vec![3, 4]], |g, p| {
                let y = g.reduce_pool(p[0], 0, PoolMode::Mean).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("pool_sum", vec![vec![3, 4]], |g, p| {
                let y = g.reduce_pool(p[0], 1, PoolMode::Sum).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("pool_max", vec![vec![3, 4]], |g, p| {
                let y = g.reduce_pool(p[0], 0, PoolMode::Max).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("transpose", vec![vec![3, 2]], |g, p| {
                let y = g.transpose(p[0]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("reshape", vec![vec![2, 6]], |g, p| {
                let y = g.reshape(p[0], vec![3, 4]).unwrap();
                let sm = g.softmax_lastdim(y);
                g.sum_all(sm)
            }),
            ("slice_concat_cols", vec![vec![2, 6]], |g, p| {
                let a = g.slice_cols(p[0], 0, 2).unwrap();
                let b = g.slice_cols(p[0], 2, 4).unwrap();
                let c = g.concat_cols(&[b, a]).unwrap();
                let sq = g.mul(c, c).unwrap();
                g.sum_all(sq)
            }),
            ("stack_rows", vec![vec![3], vec![3]], |g, p| {
                let m = g.stack_rows(&[p[0], p[1], p[0]]).unwrap();
                let sq = g.mul(m, m).unwrap();
                g.sum_all(sq)
            }),
            ("embed_rows", vec![vec![4, 3]], |g, p| {
                let rows = g.embed_rows(p[0], &[1, 3, 1]).unwrap();
                let sq = g.mul(rows, rows).unwrap();
                g.sum_all(sq)
            }),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (name, shapes, build) in cases {
            let mut store = ParamStore::new();
            for (i, shape) in shapes.iter().enumerate() {
                store.add(format!("{name}.p{i}"), shape.clone(), Init::Zeros, &mut rng);
            }
            for slot in 0..store.len() {
                for v in store.get_mut(slot).tensor.data_mut() {
                    *v = rng.random_range(-2.0..2.0);
                }
            }
            let slots: Vec<usize> = (0..store.len()).collect();
            let mut g = Graph::from_params(&store);
            let loss = build(&mut g, &slots);
            g.backward(loss).unwrap();
            let mut checked = store.clone();
            g.accumulate_param_grads(&mut checked);
            let (err, at) = gradcheck::max_rel_error(
                &checked,
                |s| {
                    let mut g = Graph::from_params(s);
                    let loss = build(&mut g, &slots);
                    g.scalar_value(loss)
                },
                gradcheck::DEFAULT_H,
            );
            assert!(err < 1e-4, "{name}: max rel err {err} at {at}");
        }
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut g = Graph::new();
            let x = g
                .constant(vec![2, 3], vec![0.37, -1.11, 2.5, 0.0, 9.1, -3.3])
                .unwrap();
            let w = g
                .constant(vec![3, 2], vec![0.5, -0.25, 1.5, 2.0, -0.75, 0.1])
                .unwrap();
            let y = g.matmul(x, w).unwrap();
            let sm = g.softmax_lastdim(y);
            g.data(sm).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
