//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Values are pushed in
//! topological order as operations are recorded, so the backward sweep is a
//! single reverse walk over the tape. Gradients live in a separate
//! [`Gradients`] table and never touch the recorded forward values.

use std::sync::Arc;

use crate::bayes::kl_element;
use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary elementwise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    /// Identical shapes.
    None,
    /// `b` has one entry per column and is repeated over rows.
    Row,
    /// `b` has one entry per row and is repeated over columns.
    Col,
}

/// Index sets for a batch of L2 group norms. Each member is a
/// `(part, flat index)` pair addressing one of the operand tensors.
#[derive(Clone, Debug, Default)]
pub struct GroupIndex {
    pub groups: Vec<Vec<(usize, usize)>>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, bcast: Bcast },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var, bcast: Bcast },
    Scale { a: Var, k: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { a: Var, start: usize },
    Lookup { table: Var, ids: Vec<usize>, transposed: bool },
    SoftmaxXent { logits: Var, targets: Vec<usize>, weights: Option<Vec<f64>>, probs: Tensor, norm: f64 },
    Sum(Var),
    Mean(Var),
    L1(Var),
    GroupL2 { parts: Vec<Var>, groups: Arc<GroupIndex> },
    VdKl { m: Var, log_sigma: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::param`]. Leaves the loss does
    /// not reach get `None`; use [`Gradients::get_or_zeros`] for a tensor.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::None);
    }
    if a.ndim() == 2 {
        let (r, c) = a.dims2();
        match b.shape() {
            [n] if *n == c => return Ok(Bcast::Row),
            [1, n] if *n == c => return Ok(Bcast::Row),
            [n, 1] if *n == r => return Ok(Bcast::Col),
            _ => {}
        }
    }
    Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
}

fn bcast_value(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match kind {
        Bcast::None => a.zip_map(b, f),
        Bcast::Row => {
            let c = a.cols();
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % c]))
                .collect();
            Tensor::from_vec(a.shape(), data).expect("shape preserved")
        }
        Bcast::Col => {
            let c = a.cols();
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i / c]))
                .collect();
            Tensor::from_vec(a.shape(), data).expect("shape preserved")
        }
    }
}

/// Reduces an upstream gradient back onto a broadcast operand's shape.
fn reduce_bcast(up: &[f64], cols: usize, kind: Bcast, out: &mut [f64]) {
    match kind {
        Bcast::None => {
            for (o, u) in out.iter_mut().zip(up) {
                *o += u;
            }
        }
        Bcast::Row => {
            for (i, u) in up.iter().enumerate() {
                out[i % cols] += u;
            }
        }
        Bcast::Col => {
            for (i, u) in up.iter().enumerate() {
                out[i / cols] += u;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// Trainable leaf: its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, noise, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b), trans_b)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Elementwise sum. `b` may be a per-column vector (`[n]`) or a per-row
    /// column (`[m, 1]`) broadcast over a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = bcast_kind("add", self.value(a), self.value(b))?;
        let value = bcast_value(self.value(a), self.value(b), bcast, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b, bcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = bcast_kind("mul", self.value(a), self.value(b))?;
        let value = bcast_value(self.value(a), self.value(b), bcast, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b, bcast }, rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| k * x);
        self.unary(a, value, Op::Scale { a, k })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.unary(a, value, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.unary(a, value, Op::Square(a))
    }

    /// Concatenates 2-D tensors along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::dim("concat", "need at least one part and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let value = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::dim("concat", format!("column counts differ: {dims:?}")));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::from_vec(&[rows, c], data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::dim("concat", format!("row counts differ: {dims:?}")));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::from_vec(&[r, cols], data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if t.ndim() != 2 || start + len > c || len == 0 {
            return Err(Error::dim(
                "slice_cols",
                format!("{:?} [{start}..{}]", t.shape(), start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::from_vec(&[r, len], data)?;
        Ok(self.unary(a, value, Op::SliceCols { a, start }))
    }

    /// Row lookup (embedding): output row `b` is `table[ids[b]]`. A 1-D
    /// table is treated as a single column, producing `[B, 1]`.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, e) = match t.shape() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            s => return Err(Error::dim("lookup", format!("table shape {s:?}"))),
        };
        if ids.is_empty() {
            return Err(Error::dim("lookup", "empty id list"));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::dim("lookup", format!("id {id} out of range for {v} rows")));
            }
            data.extend_from_slice(&t.data()[id * e..(id + 1) * e]);
        }
        let value = Tensor::from_vec(&[ids.len(), e], data)?;
        Ok(self.unary(
            table,
            value,
            Op::Lookup {
                table,
                ids: ids.to_vec(),
                transposed: false,
            },
        ))
    }

    /// Column lookup: output row `b` is column `ids[b]` of `table`. This is
    /// `onehot(ids) @ table^T` without materializing the one-hot matrix.
    pub fn lookup_cols(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 || ids.is_empty() {
            return Err(Error::dim("lookup_cols", format!("table shape {:?}", t.shape())));
        }
        let (r, c) = t.dims2();
        let mut data = Vec::with_capacity(ids.len() * r);
        for &id in ids {
            if id >= c {
                return Err(Error::dim(
                    "lookup_cols",
                    format!("id {id} out of range for {c} columns"),
                ));
            }
            data.extend((0..r).map(|i| t.data()[i * c + id]));
        }
        let value = Tensor::from_vec(&[ids.len(), r], data)?;
        Ok(self.unary(
            table,
            value,
            Op::Lookup {
                table,
                ids: ids.to_vec(),
                transposed: true,
            },
        ))
    }

    /// Weighted mean softmax cross-entropy over the rows of `logits`.
    /// Rows with weight zero (padding) contribute nothing. Returns a scalar.
    pub fn softmax_xent(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = t.dims2();
        if t.ndim() != 2 || targets.len() != r || weights.is_some_and(|w| w.len() != r) {
            return Err(Error::dim(
                "softmax_xent",
                format!("logits {:?}, {} targets", t.shape(), targets.len()),
            ));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        let mut norm = 0.0;
        for i in 0..r {
            let row = t.row(i);
            let tgt = targets[i];
            if tgt >= c {
                return Err(Error::dim("softmax_xent", format!("target {tgt} >= {c} classes")));
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            let w = weights.map_or(1.0, |w| w[i]);
            loss += w * (z.ln() + mx - row[tgt]);
            norm += w;
        }
        let value = Tensor::scalar(if norm > 0.0 { loss / norm } else { 0.0 });
        let probs = Tensor::from_vec(&[r, c], probs)?;
        Ok(self.unary(
            logits,
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                probs,
                norm,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.unary(a, value, Op::Mean(a))
    }

    /// `sum |a|`, with subgradient zero at zero.
    pub fn l1(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().map(|x| x.abs()).sum());
        self.unary(a, value, Op::L1(a))
    }

    /// L2 norm of each group in `groups`; returns a vector with one entry
    /// per group. The subgradient at an all-zero group is zero.
    pub fn group_l2(&mut self, parts: &[Var], groups: Arc<GroupIndex>) -> Result<Var> {
        if groups.groups.is_empty() {
            return Err(Error::dim("group_l2", "no groups"));
        }
        let mut norms = Vec::with_capacity(groups.groups.len());
        for g in &groups.groups {
            let mut s = 0.0;
            for &(p, i) in g {
                let part = parts
                    .get(p)
                    .ok_or_else(|| Error::dim("group_l2", format!("part {p} missing")))?;
                let x = *self
                    .value(*part)
                    .data()
                    .get(i)
                    .ok_or_else(|| Error::dim("group_l2", format!("index {i} out of range in part {p}")))?;
                s += x * x;
            }
            norms.push(s.sqrt());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::vector(norms),
            Op::GroupL2 {
                parts: parts.to_vec(),
                groups,
            },
            rg,
        ))
    }

    /// Summed sparse variational dropout KL divergence of a factorized
    /// normal posterior `(m, exp(log_sigma))` from the log-uniform prior.
    pub fn vd_kl(&mut self, m: Var, log_sigma: Var) -> Result<Var> {
        same_shape("vd_kl", self.value(m), self.value(log_sigma))?;
        let total: f64 = self
            .value(m)
            .data()
            .iter()
            .zip(self.value(log_sigma).data())
            .map(|(&mu, &ls)| kl_element(mu, ls).0)
            .sum();
        let rg = self.rg(m) || self.rg(log_sigma);
        Ok(self.push(Tensor::scalar(total), Op::VdKl { m, log_sigma }, rg))
    }

    /// Gradients of a scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let v = self.value(loss);
        if !v.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_with_seed(loss, Tensor::from_vec(v.shape(), vec![1.0])?)
    }

    /// Vector-Jacobian product: gradients of `sum(seed * output)`.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        same_shape("backward", self.value(output), &seed)?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &up, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let u = up.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2();
                let n = node.value.cols();
                let (br, bc) = bv.dims2();
                if self.rg(*a) {
                    // dA = dC @ B^T  (or dC @ B when B was transposed)
                    let ga = acc_buf(grads, *a, av.shape());
                    let bstr = if *trans_b { (bc as isize, 1) } else { (1, bc as isize) };
                    gemm(m, n, k, 1.0, (u, n as isize, 1), (bv.data(), bstr.0, bstr.1), 1.0, ga);
                }
                if self.rg(*b) {
                    let gb = acc_buf(grads, *b, bv.shape());
                    if *trans_b {
                        // dB (n x k) = dC^T @ A
                        gemm(n, m, k, 1.0, (u, 1, n as isize), (av.data(), k as isize, 1), 1.0, gb);
                    } else {
                        // dB (k x n) = A^T @ dC
                        gemm(k, m, n, 1.0, (av.data(), 1, k as isize), (u, n as isize, 1), 1.0, gb);
                    }
                    debug_assert_eq!(br * bc, gb.len());
                }
            }
            Op::Add { a, b, bcast } => {
                if self.rg(*a) {
                    acc_slice(grads, *a, self.value(*a).shape(), u, 1.0);
                }
                if self.rg(*b) {
                    let cols = node.value.cols();
                    let gb = acc_buf(grads, *b, self.value(*b).shape());
                    reduce_bcast(u, cols, *bcast, gb);
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    acc_slice(grads, *a, self.value(*a).shape(), u, 1.0);
                }
                if self.rg(*b) {
                    acc_slice(grads, *b, self.value(*b).shape(), u, -1.0);
                }
            }
            Op::Mul { a, b, bcast } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let cols = node.value.cols();
                if self.rg(*a) {
                    let bd = bv.data();
                    let ga = acc_buf(grads, *a, av.shape());
                    for (i, g) in ga.iter_mut().enumerate() {
                        let bi = match bcast {
                            Bcast::None => i,
                            Bcast::Row => i % cols,
                            Bcast::Col => i / cols,
                        };
                        *g += u[i] * bd[bi];
                    }
                }
                if self.rg(*b) {
                    let prod: Vec<f64> = u.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    let gb = acc_buf(grads, *b, bv.shape());
                    reduce_bcast(&prod, cols, *bcast, gb);
                }
            }
            Op::Scale { a, k } => acc_slice(grads, *a, node.value.shape(), u, *k),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc_map(grads, *a, node.value.shape(), |i| u[i] * y[i] * (1.0 - y[i]));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc_map(grads, *a, node.value.shape(), |i| u[i] * (1.0 - y[i] * y[i]));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc_map(grads, *a, node.value.shape(), |i| u[i] * y[i]);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc_map(grads, *a, node.value.shape(), |i| u[i] / x[i]);
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc_map(grads, *a, node.value.shape(), |i| 0.5 * u[i] / y[i]);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc_map(grads, *a, node.value.shape(), |i| 2.0 * u[i] * x[i]);
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (pr, pc) = pv.dims2();
                    if self.rg(p) {
                        let gp = acc_buf(grads, p, pv.shape());
                        if *axis == 0 {
                            let src = &u[offset * total_cols..(offset + pr) * total_cols];
                            for (g, s) in gp.iter_mut().zip(src) {
                                *g += s;
                            }
                        } else {
                            for i in 0..pr {
                                let src = &u[i * total_cols + offset..i * total_cols + offset + pc];
                                for (g, s) in gp[i * pc..(i + 1) * pc].iter_mut().zip(src) {
                                    *g += s;
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let c = av.cols();
                let len = node.value.cols();
                let ga = acc_buf(grads, *a, av.shape());
                for i in 0..node.value.rows() {
                    for j in 0..len {
                        ga[i * c + start + j] += u[i * len + j];
                    }
                }
            }
            Op::Lookup {
                table,
                ids,
                transposed,
            } => {
                let tv = self.value(*table);
                let gt = acc_buf(grads, *table, tv.shape());
                let width = node.value.cols();
                if *transposed {
                    let c = tv.cols();
                    for (b, &id) in ids.iter().enumerate() {
                        for r in 0..width {
                            gt[r * c + id] += u[b * width + r];
                        }
                    }
                } else {
                    for (b, &id) in ids.iter().enumerate() {
                        for e in 0..width {
                            gt[id * width + e] += u[b * width + e];
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
                norm,
            } => {
                if *norm <= 0.0 {
                    return;
                }
                let c = probs.cols();
                let p = probs.data();
                let g0 = u[0] / norm;
                let gl = acc_buf(grads, *logits, probs.shape());
                for (i, &t) in targets.iter().enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[i]) * g0;
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        gl[i * c + j] += w * p[i * c + j];
                    }
                    gl[i * c + t] -= w;
                }
            }
            Op::Sum(a) => {
                let g = u[0];
                acc_map(grads, *a, self.value(*a).shape(), |_| g);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let g = u[0] / av.len() as f64;
                acc_map(grads, *a, av.shape(), |_| g);
            }
            Op::L1(a) => {
                let x = self.value(*a).data();
                let g = u[0];
                acc_map(grads, *a, self.value(*a).shape(), |i| {
                    if x[i] > 0.0 {
                        g
                    } else if x[i] < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
            }
            Op::GroupL2 { parts, groups } => {
                let norms = node.value.data();
                for (gi, members) in groups.groups.iter().enumerate() {
                    let n = norms[gi];
                    if n == 0.0 || u[gi] == 0.0 {
                        continue;
                    }
                    let scale = u[gi] / n;
                    for &(p, i) in members {
                        let pv = parts[p];
                        if !self.rg(pv) {
                            continue;
                        }
                        let x = self.value(pv).data()[i];
                        let gp = acc_buf(grads, pv, self.value(pv).shape());
                        gp[i] += scale * x;
                    }
                }
            }
            Op::VdKl { m, log_sigma } => {
                let g = u[0];
                let md = self.value(*m).data();
                let ld = self.value(*log_sigma).data();
                let parts: Vec<(f64, f64)> = md
                    .iter()
                    .zip(ld)
                    .map(|(&mu, &ls)| {
                        let (_, dm, dls) = kl_element(mu, ls);
                        (dm, dls)
                    })
                    .collect();
                if self.rg(*m) {
                    acc_map(grads, *m, self.value(*m).shape(), |i| g * parts[i].0);
                }
                if self.rg(*log_sigma) {
                    acc_map(grads, *log_sigma, self.value(*log_sigma).shape(), |i| g * parts[i].1);
                }
            }
        }
    }
}

fn acc_buf<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn acc_slice(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], src: &[f64], k: f64) {
    let g = acc_buf(grads, v, shape);
    for (x, s) in g.iter_mut().zip(src) {
        *x += k * s;
    }
}

fn acc_map(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl Fn(usize) -> f64) {
    let g = acc_buf(grads, v, shape);
    for (i, x) in g.iter_mut().enumerate() {
        *x += f(i);
    }
}
