//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Nodes are appended in creation order, so walking the node list backwards is
//! a reverse topological traversal. Each node is visited at most once.

use crate::error::{Result, TensorError};
use crate::kernels::{self, AttnShape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddBias(NodeId, NodeId),
    Sum(NodeId),
    Gelu(NodeId),
    RmsNorm { x: NodeId, scale: NodeId, inv_rms: Vec<f32> },
    Embed { tok: NodeId, cls: NodeId, pos: NodeId, layout: SequenceLayout },
    Attention { qkv: NodeId, shape: AttnShape, probs: Vec<f32> },
    CrossEntropy { logits: NodeId, probs: Vec<f32>, targets: Vec<Option<usize>>, count: usize },
    Mse(NodeId, NodeId),
    GatherRows { table: NodeId, indices: Vec<usize> },
}

/// Token layout for [`Tape::embed`]: each sequence is one class row followed by `seq - 1` token rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub tokens: Vec<usize>,
    pub classes: Vec<usize>,
    pub seq: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when the node did not influence the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match self.grads[id.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn add_into_slice(slot: &mut Option<Vec<f32>>, len: usize, f: impl FnOnce(&mut [f32])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Consumes the tape and returns one node's value without copying it.
    pub fn into_value(mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::scalar(0.0))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Records a leaf; gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let rg = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad: rg });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_grad(false))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(TensorError::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<NodeId> {
        self.same_shape(a, b, name)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, op, rg, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg, "scale")
    }

    /// `x[r, :] + bias` for every row of a matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(bias).numel() != cols {
            return Err(TensorError::Shape(format!("bias of {} for {cols} columns", self.value(bias).numel())));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        data.chunks_mut(cols).for_each(|r| r.iter_mut().zip(b).for_each(|(v, bb)| *v += bb));
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::AddBias(x, bias), rg, "add_bias")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg, "sum")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| kernels::gelu(x)).collect())?;
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg, "gelu")
    }

    /// Row-wise RMS norm of a matrix with a per-column scale.
    pub fn rms_norm(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(scale).numel() != cols {
            return Err(TensorError::Shape("rms_norm scale width".into()));
        }
        let mut out = vec![0.0; rows * cols];
        let inv_rms = kernels::rms_norm_rows(self.value(x).data(), self.value(scale).data(), &mut out);
        let rg = self.rg(x) || self.rg(scale);
        self.push(Tensor::new(vec![rows, cols], out)?, Op::RmsNorm { x, scale, inv_rms }, rg, "rms_norm")
    }

    /// Sequence embedding: row 0 of every sequence is `cls[class] + pos[0]`, row t is
    /// `tok[token] + pos[t]`. Output is `[batch * seq, dim]`.
    pub fn embed(&mut self, tok: NodeId, cls: NodeId, pos: NodeId, layout: SequenceLayout) -> Result<NodeId> {
        let (tv, dim) = self.value(tok).dims2()?;
        let (cv, dim2) = self.value(cls).dims2()?;
        let (pv, dim3) = self.value(pos).dims2()?;
        if dim != dim2 || dim != dim3 {
            return Err(TensorError::Shape("embedding tables disagree on width".into()));
        }
        let SequenceLayout { tokens, classes, seq } = &layout;
        let (seq, batch) = (*seq, classes.len());
        if seq == 0 || seq > pv {
            return Err(TensorError::Shape(format!("sequence length {seq} exceeds {pv} positions")));
        }
        if tokens.len() != batch * (seq - 1) {
            return Err(TensorError::Shape(format!(
                "{} tokens for {batch} sequences of {} tokens",
                tokens.len(),
                seq - 1
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= tv) {
            return Err(TensorError::Index(format!("token {t} outside vocabulary of {tv}")));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= cv) {
            return Err(TensorError::Index(format!("class {c} outside {cv} class rows")));
        }
        let (tokd, clsd, posd) = (self.value(tok).data(), self.value(cls).data(), self.value(pos).data());
        let mut out = vec![0.0; batch * seq * dim];
        for b in 0..batch {
            for t in 0..seq {
                let src = if t == 0 {
                    &clsd[classes[b] * dim..(classes[b] + 1) * dim]
                } else {
                    let id = tokens[b * (seq - 1) + t - 1];
                    &tokd[id * dim..(id + 1) * dim]
                };
                let p = &posd[t * dim..(t + 1) * dim];
                let o = &mut out[(b * seq + t) * dim..(b * seq + t + 1) * dim];
                for i in 0..dim {
                    o[i] = src[i] + p[i];
                }
            }
        }
        let rg = self.rg(tok) || self.rg(cls) || self.rg(pos);
        let t = Tensor::new(vec![batch * seq, dim], out)?;
        self.push(t, Op::Embed { tok, cls, pos, layout }, rg, "embed")
    }

    /// Multi-head attention over packed `[batch*seq, 3*dim]` q|k|v rows.
    pub fn attention(&mut self, qkv: NodeId, batch: usize, seq: usize, heads: usize, causal: bool) -> Result<NodeId> {
        let (rows, width) = self.value(qkv).dims2()?;
        if rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(TensorError::Shape(format!(
                "attention input {rows}x{width} for batch {batch}, seq {seq}, {heads} heads"
            )));
        }
        let shape = AttnShape { batch, seq, dim: width / 3, heads, causal };
        let (out, probs) = kernels::attention_forward(self.value(qkv).data(), shape);
        let rg = self.rg(qkv);
        let t = Tensor::new(vec![rows, width / 3], out)?;
        self.push(t, Op::Attention { qkv, shape, probs }, rg, "attention")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    ///
    /// Rows whose target equals `ignore_index` are excluded. With `restrict`, each row's
    /// softmax is renormalised over its listed indices only.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_index: Option<usize>,
        restrict: Option<&[Vec<usize>]>,
    ) -> Result<NodeId> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(TensorError::Shape(format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(r) = restrict {
            if r.len() != rows {
                return Err(TensorError::Shape("restriction list length".into()));
            }
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0f32; rows * vocab];
        let mut kept = Vec::with_capacity(rows);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &target) in targets.iter().enumerate() {
            if Some(target) == ignore_index {
                kept.push(None);
                continue;
            }
            if target >= vocab {
                return Err(TensorError::Index(format!("target {target} outside vocabulary of {vocab}")));
            }
            let row = &data[r * vocab..(r + 1) * vocab];
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            let lse = match restrict {
                None => {
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
                    for (p, &v) in prow.iter_mut().zip(row) {
                        *p = ((v as f64 - max).exp() / z) as f32;
                    }
                    max + z.ln()
                }
                Some(allowed) => {
                    let allowed = &allowed[r];
                    if !allowed.contains(&target) {
                        return Err(TensorError::Index(format!("target {target} outside its restriction set")));
                    }
                    if let Some(&bad) = allowed.iter().find(|&&i| i >= vocab) {
                        return Err(TensorError::Index(format!("restriction index {bad} outside vocabulary")));
                    }
                    let max = allowed.iter().map(|&i| row[i]).fold(f32::NEG_INFINITY, f32::max) as f64;
                    let z: f64 = allowed.iter().map(|&i| (row[i] as f64 - max).exp()).sum();
                    for &i in allowed {
                        prow[i] = ((row[i] as f64 - max).exp() / z) as f32;
                    }
                    max + z.ln()
                }
            };
            total += lse - row[target] as f64;
            count += 1;
            kept.push(Some(target));
        }
        if count == 0 {
            return Err(TensorError::Contract("cross entropy with every row ignored".into()));
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, targets: kept, count },
            rg,
            "cross_entropy",
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel();
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar((s / n as f64) as f32), Op::Mse(a, b), rg, "mse")
    }

    /// Rows of a `[rows, cols]` table selected by `indices`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.value(table).dims2()?;
        if indices.is_empty() {
            return Err(TensorError::Shape("gather of zero rows".into()));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index(format!("row {i} of {rows}")));
            }
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        let v = Tensor::new(vec![indices.len(), cols], out)?;
        self.push(v, Op::GatherRows { table, indices: indices.to_vec() }, rg, "gather_rows")
    }

    /// Gradients of a scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Non-leaf gradients were consumed; keep them only for leaves.
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Vec<f32>, grads: &mut [Option<Vec<f32>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = out.shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, &g, false, val(*b), true, 0.0, &mut da);
                    add_into(&mut grads[a.0], da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, &g, false, 0.0, &mut db);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => add_into(&mut grads[a.0], g.iter().map(|v| v * c).collect()),
            Op::AddBias(x, bias) => {
                let cols = out.shape()[1];
                if wants(*bias) {
                    add_into_slice(&mut grads[bias.0], cols, |db| {
                        for row in g.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    });
                }
                if wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                add_into(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::Gelu(a) => {
                let d = g.iter().zip(val(*a)).map(|(gv, &x)| gv * kernels::gelu_grad(x)).collect();
                add_into(&mut grads[a.0], d);
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let xv = val(*x);
                let sv = val(*scale);
                let dim = sv.len();
                if wants(*scale) {
                    add_into_slice(&mut grads[scale.0], dim, |ds| {
                        for ((row, grow), &r) in xv.chunks(dim).zip(g.chunks(dim)).zip(inv_rms) {
                            for j in 0..dim {
                                ds[j] += grow[j] * row[j] * r;
                            }
                        }
                    });
                }
                if wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (((row, grow), drow), &r) in
                        xv.chunks(dim).zip(g.chunks(dim)).zip(dx.chunks_mut(dim)).zip(inv_rms)
                    {
                        let dot: f32 = (0..dim).map(|j| grow[j] * sv[j] * row[j]).sum();
                        let c = r * r * r * dot / dim as f32;
                        for j in 0..dim {
                            drow[j] = r * grow[j] * sv[j] - c * row[j];
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Embed { tok, cls, pos, layout } => {
                let dim = out.shape()[1];
                let seq = layout.seq;
                for (table, is_pos) in [(*tok, false), (*cls, false), (*pos, true)] {
                    if !wants(table) {
                        continue;
                    }
                    let len = self.value(table).numel();
                    add_into_slice(&mut grads[table.0], len, |dt| {
                        for b in 0..layout.classes.len() {
                            for t in 0..seq {
                                let row = if is_pos {
                                    Some(t)
                                } else if table == *cls && t == 0 {
                                    Some(layout.classes[b])
                                } else if table == *tok && t > 0 {
                                    Some(layout.tokens[b * (seq - 1) + t - 1])
                                } else {
                                    None
                                };
                                if let Some(row) = row {
                                    let src = &g[(b * seq + t) * dim..(b * seq + t + 1) * dim];
                                    dt[row * dim..(row + 1) * dim]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(d, v)| *d += v);
                                }
                            }
                        }
                    });
                }
            }
            Op::Attention { qkv, shape, probs } => {
                let d = kernels::attention_backward(val(*qkv), probs, &g, *shape);
                add_into(&mut grads[qkv.0], d);
            }
            Op::CrossEntropy { logits, probs, targets, count } => {
                let vocab = self.value(*logits).shape()[1];
                let scale = g[0] / *count as f32;
                let mut d = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let drow = &mut d[r * vocab..(r + 1) * vocab];
                        drow.iter_mut()
                            .zip(&probs[r * vocab..(r + 1) * vocab])
                            .for_each(|(dv, p)| *dv = p * scale);
                        drow[*t] -= scale;
                    }
                }
                add_into(&mut grads[logits.0], d);
            }
            Op::Mse(a, b) => {
                let n = out.numel().max(self.value(*a).numel()) as f32;
                let c = 2.0 * g[0] / n;
                let diff: Vec<f32> = val(*a).iter().zip(val(*b)).map(|(x, y)| (x - y) * c).collect();
                if wants(*b) {
                    add_into(&mut grads[b.0], diff.iter().map(|v| -v).collect());
                }
                if wants(*a) {
                    add_into(&mut grads[a.0], diff);
                }
            }
            Op::GatherRows { table, indices } => {
                let cols = out.shape()[1];
                let len = self.value(*table).numel();
                add_into_slice(&mut grads[table.0], len, |dt| {
                    for (k, &i) in indices.iter().enumerate() {
                        dt[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
        }
    }
}
