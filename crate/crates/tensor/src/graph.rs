use crate::error::{Result, TensorError};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Softmax(usize, usize),
    LogSoftmaxRows(usize),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        blocks: usize,
        probs: Vec<f64>,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    GatherRows(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every input precedes its
/// consumer. A graph created with [`Graph::no_grad`] evaluates the same ops
/// but records them as constants, so nothing can be differentiated.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::dim(op, "rank-2 tensor", format!("{shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad || matches!(op, Op::Param(_)) {
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        op: Op,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(op, shape, value, requires_grad))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Records a parameter from `store`; its gradient is reported against `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let rg = t.requires_grad() && self.grad_enabled;
        let op = if rg { Op::Param(id) } else { Op::Leaf };
        self.push(op, t.shape().to_vec(), t.data().to_vec(), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(
                op,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        self.push_checked(name, op, self.shape(a).to_vec(), value, rg)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a.0]);
        self.push_checked(name, op, self.shape(a).to_vec(), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", a, Op::AddScalar(a.0), |x| x + s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a.0), kernels::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        self.map("log", a, Op::Log(a.0), f64::ln)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, Op::Gelu(a.0), kernels::gelu)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (k2, n) = rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!("inner extent {k}"),
                format!("{k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        self.push_checked("matmul", Op::MatMul(a.0, b.0), vec![m, n], out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.shape(a))?;
        let value = kernels::transpose(self.value(a), r, c);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::Transpose(a.0), vec![c, r], value, rg))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a.0]);
        self.push_checked("sum", Op::Sum(a.0), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a.0]);
        self.push_checked("mean", Op::Mean(a.0), vec![1], vec![s], rg)
    }

    /// Column means of a `[r×c]` matrix, returned as `[1×c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rank2("mean_rows", self.shape(a))?;
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[a.0]);
        self.push_checked("mean_rows", Op::MeanRows(a.0), vec![1, c], out, rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim(
                "softmax",
                format!("axis < {}", shape.len()),
                axis,
            ));
        }
        let y = kernels::softmax_axis(self.value(a), &shape, axis);
        let rg = self.rg(&[a.0]);
        self.push_checked("softmax", Op::Softmax(a.0, axis), shape, y, rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = rank2("log_softmax_rows", self.shape(a))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a.0]);
        let shape = self.shape(a).to_vec();
        self.push_checked("log_softmax_rows", Op::LogSoftmaxRows(a.0), shape, out, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::dim("concat", format!("axis < {}", base.len()), axis));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::dim(
                    "concat",
                    format!("{base:?} off axis {axis}"),
                    format!("{s:?}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let chunk = n * inner;
                out.extend_from_slice(&self.value(*p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Op::Concat(ids, axis), shape, out, rg))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::dim(
                "slice",
                format!("range within {shape:?} on axis {axis}"),
                format!("{start}..{end}"),
            ));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        let v = self.value(a);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Op::Slice {
                x: a.0,
                axis,
                start,
            },
            new_shape,
            out,
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.contains(&0) {
            return Err(TensorError::dim(
                "reshape",
                format!("{:?}", self.shape(a)),
                format!("{shape:?}"),
            ));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Op::Reshape(a.0), shape.to_vec(), value, rg))
    }

    fn row_operand(&self, name: &'static str, x: Var, row: Var) -> Result<usize> {
        let (_, c) = rank2(name, self.shape(x))?;
        if self.value(row).len() != c {
            return Err(TensorError::dim(
                name,
                format!("row of {c}"),
                format!("{:?}", self.shape(row)),
            ));
        }
        Ok(c)
    }

    /// `x[r×c] + row[c]` applied to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_operand("add_row", x, row)?;
        let r = self.value(row);
        let value: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % c])
            .collect();
        let rg = self.rg(&[x.0, row.0]);
        let shape = self.shape(x).to_vec();
        self.push_checked("add_row", Op::AddRow(x.0, row.0), shape, value, rg)
    }

    /// `x[r×c] ⊙ row[c]` applied to every row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_operand("mul_row", x, row)?;
        let r = self.value(row);
        let value: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * r[i % c])
            .collect();
        let rg = self.rg(&[x.0, row.0]);
        let shape = self.shape(x).to_vec();
        self.push_checked("mul_row", Op::MulRow(x.0, row.0), shape, value, rg)
    }

    /// `x · w + b` for `x[r×i]`, `w[i×o]`, `b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.row_operand("layer_norm", x, gamma)?;
        self.row_operand("layer_norm", x, beta)?;
        let (out, xhat, inv_std) =
            kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), c);
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let shape = self.shape(x).to_vec();
        self.push_checked(
            "layer_norm",
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            shape,
            out,
            rg,
        )
    }

    /// Multi-head scaled dot-product attention `softmax(QKᵀ/√d_h)·V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.block_attention(q, k, v, heads, 1)
    }

    /// Attention applied independently to `blocks` equal row blocks of `q`,
    /// `k` and `v`: block `b` of the queries only sees block `b` of the keys.
    /// This runs a batch of same-length sequences stacked row-wise.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: usize,
    ) -> Result<Var> {
        let (rq, d) = rank2("attention", self.shape(q))?;
        let (rk, dk) = rank2("attention", self.shape(k))?;
        if dk != d || self.shape(v) != [rk, d] {
            return Err(TensorError::dim(
                "attention",
                format!("k, v of [{rk}×{d}]"),
                format!("{:?}, {:?}", self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!(
                "attention: {d} not divisible by {heads} heads"
            )));
        }
        if blocks == 0 || rq % blocks != 0 || rk % blocks != 0 {
            return Err(TensorError::Contract(format!(
                "attention: {rq} query rows and {rk} key rows do not split into {blocks} blocks"
            )));
        }
        let (sq, sk) = (rq / blocks, rk / blocks);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Vec::with_capacity(rq * d);
        let mut probs = Vec::with_capacity(blocks * heads * sq * sk);
        for b in 0..blocks {
            let (o, p) = kernels::attention(
                &qv[b * sq * d..(b + 1) * sq * d],
                &kv[b * sk * d..(b + 1) * sk * d],
                &vv[b * sk * d..(b + 1) * sk * d],
                sq,
                sk,
                d,
                heads,
            );
            out.extend(o);
            probs.extend(p);
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        self.push_checked(
            "attention",
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                blocks,
                probs,
            },
            vec![rq, d],
            out,
            rg,
        )
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rank2("normalize_rows", self.shape(x))?;
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::new();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push_checked("normalize_rows", Op::NormalizeRows { x: x.0, norms }, shape, out, rg)
    }

    /// Rows `ids` of a `[v×d]` table, as `[ids.len()×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = rank2("gather_rows", self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::dim("gather_rows", format!("row id < {v}"), bad));
        }
        if ids.is_empty() {
            return Err(TensorError::Contract("gather_rows with no ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Op::GatherRows(table.0, ids.to_vec()),
            vec![ids.len(), d],
            out,
            rg,
        ))
    }

    /// Flat-index gather, returned as a vector.
    pub fn pick(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = flat.iter().find(|&&i| i >= n) {
            return Err(TensorError::dim("pick", format!("index < {n}"), bad));
        }
        if flat.is_empty() {
            return Err(TensorError::Contract("pick with no indices".into()));
        }
        let v = self.value(x);
        let out = flat.iter().map(|&i| v[i]).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::Pick(x.0, flat.to_vec()), vec![flat.len()], out, rg))
    }

    /// Reverse pass from a one-element `loss`. Consumes (clears) the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.grad_enabled {
            return Err(TensorError::Contract(
                "backward on a no-grad graph".into(),
            ));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut param_grads = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                let g = grads[id].clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
                param_grads.push((p, g));
            }
        }
        Ok(Gradients {
            grads,
            param_grads,
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    delta(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| -> &[f64] { &nodes[i].value };
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            });
            acc(grads, nodes, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            });
        }
        Op::Scale(a, k) => {
            acc(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y));
        }
        Op::AddScalar(a) => {
            acc(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let (va, vb) = (val(*a), val(*b));
            // dA = G·Bᵀ, dB = Aᵀ·G
            acc(grads, nodes, *a, |s| kernels::matmul_bt_acc(g, vb, s, m, n, k));
            acc(grads, nodes, *b, |s| kernels::matmul_at_acc(va, g, s, m, k, n));
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let gt = kernels::transpose(g, c, r);
            acc(grads, nodes, *a, |s| s.iter_mut().zip(&gt).for_each(|(x, y)| *x += y));
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            acc(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Exp(a) => {
            let y = &node.value;
            acc(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            });
        }
        Op::Log(a) => {
            let x = val(*a);
            acc(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / x[i];
                }
            });
        }
        Op::Gelu(a) => {
            let x = val(*a);
            acc(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * kernels::gelu_grad(x[i]);
                }
            });
        }
        Op::Sum(a) => {
            acc(grads, nodes, *a, |s| s.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            acc(grads, nodes, *a, |s| s.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::MeanRows(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            acc(grads, nodes, *a, |s| {
                for (i, x) in s.iter_mut().enumerate() {
                    *x += g[i % c] / r as f64;
                }
            });
        }
        Op::Softmax(a, axis) => {
            let dx = kernels::softmax_axis_backward(&node.value, g, &node.shape, *axis);
            acc(grads, nodes, *a, |s| s.iter_mut().zip(&dx).for_each(|(x, y)| *x += y));
        }
        Op::LogSoftmaxRows(a) => {
            let c = node.shape[1];
            acc(grads, nodes, *a, |s| {
                for (r, (srow, yrow)) in s.chunks_mut(c).zip(node.value.chunks(c)).enumerate() {
                    let grow = &g[r * c..(r + 1) * c];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        srow[j] += grow[j] - yrow[j].exp() * gsum;
                    }
                }
            });
        }
        Op::Concat(ids, axis) => {
            let (outer, total, inner) = kernels::axis_split(&node.shape, *axis);
            let mut offset = 0;
            for &p in ids {
                let n = nodes[p].shape[*axis];
                acc(grads, nodes, p, |s| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * n * inner;
                        for i in 0..n * inner {
                            s[dst + i] += g[src + i];
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = kernels::axis_split(&nodes[*x].shape, *axis);
            let len = node.shape[*axis];
            acc(grads, nodes, *x, |s| {
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        s[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::Reshape(a) => {
            acc(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::AddRow(x, row) => {
            let c = node.shape[1];
            acc(grads, nodes, *x, |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            acc(grads, nodes, *row, |s| {
                for (i, gv) in g.iter().enumerate() {
                    s[i % c] += gv;
                }
            });
        }
        Op::MulRow(x, row) => {
            let c = node.shape[1];
            let (vx, vr) = (val(*x), val(*row));
            acc(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vr[i % c];
                }
            });
            acc(grads, nodes, *row, |s| {
                for (i, gv) in g.iter().enumerate() {
                    s[i % c] += gv * vx[i];
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = node.shape[1];
            let gm = val(*gamma);
            if nodes[*x].requires_grad {
                let dx = kernels::layer_norm_backward_input(g, xhat, inv_std, gm, c);
                acc(grads, nodes, *x, |s| s.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
            }
            acc(grads, nodes, *gamma, |s| {
                for (i, gv) in g.iter().enumerate() {
                    s[i % c] += gv * xhat[i];
                }
            });
            acc(grads, nodes, *beta, |s| {
                for (i, gv) in g.iter().enumerate() {
                    s[i % c] += gv;
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            blocks,
            probs,
        } => {
            let d = nodes[*q].shape[1];
            let sq = nodes[*q].shape[0] / blocks;
            let sk = nodes[*k].shape[0] / blocks;
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (mut dq, mut dk, mut dv) = (
                Vec::with_capacity(qv.len()),
                Vec::with_capacity(kv.len()),
                Vec::with_capacity(vv.len()),
            );
            let ph = heads * sq * sk;
            for b in 0..*blocks {
                let qs = b * sq * d..(b + 1) * sq * d;
                let ks = b * sk * d..(b + 1) * sk * d;
                let ag = kernels::attention_backward(
                    &g[qs.clone()],
                    &qv[qs],
                    &kv[ks.clone()],
                    &vv[ks],
                    &probs[b * ph..(b + 1) * ph],
                    sq,
                    sk,
                    d,
                    *heads,
                );
                dq.extend(ag.dq);
                dk.extend(ag.dk);
                dv.extend(ag.dv);
            }
            acc(grads, nodes, *q, |s| s.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
            acc(grads, nodes, *k, |s| s.iter_mut().zip(&dk).for_each(|(a, b)| *a += b));
            acc(grads, nodes, *v, |s| s.iter_mut().zip(&dv).for_each(|(a, b)| *a += b));
        }
        Op::NormalizeRows { x, norms } => {
            let c = node.shape[1];
            let y = &node.value;
            acc(grads, nodes, *x, |s| {
                for (r, n) in norms.iter().enumerate() {
                    let base = r * c;
                    let dot: f64 = (0..c).map(|j| y[base + j] * g[base + j]).sum();
                    for j in 0..c {
                        s[base + j] += (g[base + j] - y[base + j] * dot) / n;
                    }
                }
            });
        }
        Op::GatherRows(table, ids) => {
            let d = node.shape[1];
            acc(grads, nodes, *table, |s| {
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        s[i * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::Pick(x, flat) => {
            acc(grads, nodes, *x, |s| {
                for (gv, &i) in g.iter().zip(flat) {
                    s[i] += gv;
                }
            });
        }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_grads: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// dLoss/dVar, or `None` if `v` does not require gradients or was not
    /// reached from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of recorded parameters. A parameter bound several times
    /// appears once per binding.
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.param_grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::no_grad();
        let i2 = g.constant(&Tensor::identity(2));
        let m = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = g.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = g.matmul(p, b).unwrap();
        assert_eq!(g.value(y), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::no_grad();
        let x = g.constant(&Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-7.5, 0.0, 3.25, 100.0] {
            let x = g.constant(&Tensor::vector(vec![c, c + 2f64.ln()]));
            let y = g.softmax(x, 0).unwrap();
            assert!((g.value(y)[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((g.value(y)[1] - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::no_grad();
        let z = g.constant(&Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.scalar(s), 0.5);
        let x = g.constant(&Tensor::vector(vec![2.0, 4.0, 6.0]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.scalar(m), 4.0);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn exp_overflow_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::scalar(1000.0));
        assert!(matches!(g.exp(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_independent_leaf_is_zero_or_absent() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = g.leaf(&Tensor::vector(vec![3.0, 4.0]).with_grad());
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(x).map(|s| s.to_vec()).unwrap_or(vec![0.0; 2]);
        assert_eq!(gx, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn diamond_accumulates() {
        // y = a*b + a, with b = 2a, so dy/da = 4a + 1.
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::scalar(3.0).with_grad());
        let b = g.scale(a, 2.0).unwrap();
        let ab = g.mul(a, b).unwrap();
        let y = g.add(ab, a).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &[13.0]);
    }

    #[test]
    fn no_grad_graph_records_constants() {
        let mut g = Graph::no_grad();
        let x = g.leaf(&Tensor::scalar(1.0).with_grad());
        let y = g.scale(x, 2.0).unwrap();
        assert!(!g.requires_grad(y));
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn block_attention_matches_separate_blocks() {
        let mut rng = rand::rng();
        let q = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let mut g = Graph::no_grad();
        let (qv, kv) = (g.constant(&q), g.constant(&k));
        let joint = g.block_attention(qv, kv, kv, 2, 2).unwrap();
        let mut parts = Vec::new();
        for b in 0..2 {
            let qb = g.slice(qv, 0, 3 * b, 3 * b + 3).unwrap();
            let kb = g.slice(kv, 0, 2 * b, 2 * b + 2).unwrap();
            parts.push(g.attention(qb, kb, kb, 2).unwrap());
        }
        let sep = g.concat(&parts, 0).unwrap();
        assert_eq!(g.value(joint), g.value(sep));
        assert!(g.block_attention(qv, kv, kv, 2, 4).is_err());
    }
}
