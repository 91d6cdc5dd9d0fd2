//! Reverse-mode gradient tape.
//!
//! Operations append nodes to a [`Tape`]; every node's parents precede it, so
//! the backward pass is a single reverse sweep. Gradients of a node that feeds
//! several consumers accumulate by summation.

use crate::error::{Error, Result};
use crate::tensor::value::{strides, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    // per output batch entry: (a block index, b block index)
    blocks: Vec<(usize, usize)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddSuffix(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var, MatmulPlan),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Relu(Var),
    Abs(Var),
    Gather { table: Var, ids: Vec<usize> },
    GatherConcat { tables: Vec<Var>, ids: Vec<usize> },
    CrossEntropy { logits: Var, rows: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    MaskedMean { x: Var, mask: Vec<bool>, counts: Vec<usize> },
    Correlation(Box<CorrelationSaved>),
    MaxAll { x: Var, argmax: usize },
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct CorrelationSaved {
    x: Var,
    y: Var,
    rows: usize,
    cols: usize,
    cx: Vec<f64>,
    cy: Vec<f64>,
    num: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    guarded: Vec<bool>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower bound on the product of the two variances inside the correlation
/// denominator's square root.
pub const CORRELATION_EPS: f64 = 1e-8;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Detached leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records a detached copy of `v` (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn zip_same(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape
    /// (bias rows, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let inner = tb.numel();
        let bd = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + bd[i % inner]).collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.push(out, Op::AddSuffix(a, b), &[a, b]))
    }

    /// `mul * a + add`, elementwise.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let out = self.value(a).map(|x| mul * x + add);
        self.push(out, Op::Affine(a, mul), &[a])
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Var {
        self.affine(a, mul, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Maximum over all entries. The gradient goes to the first maximal entry.
    pub fn max_all(&mut self, a: Var) -> Var {
        let data = self.value(a).data();
        let mut argmax = 0;
        for (i, &x) in data.iter().enumerate() {
            if x > data[argmax] {
                argmax = i;
            }
        }
        let m = data[argmax];
        self.push(Tensor::scalar(m), Op::MaxAll { x: a, argmax }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::Shape(format!("permute: axes {axes:?} invalid for shape {:?}", t.shape())));
        }
        let out = permute_tensor(t, axes);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`. Leading
    /// batch extents broadcast (equal, or 1, or absent).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| shape_err("matmul", sa, sb))?;
        let blocks = broadcast_blocks(&batch, ba, bb);
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        let mut out = vec![0.0; blocks.len() * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for (i, &(ia, ib)) in blocks.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                (&da[ia * m * k..(ia + 1) * m * k], k, 1),
                (&db[ib * k * n..(ib + 1) * k * n], n, 1),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let plan = MatmulPlan { m, k, n, blocks };
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b, plan), &[a, b]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Shape(format!("softmax: axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), y);
        Ok(self.push(out, Op::Softmax { x: a, axis }, &[a]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx.shape().last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{d}]",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), y);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Row lookup: `table[V, D]` indexed by `ids` gives `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("gather: table must be rank 2, got {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("gather: id {bad} out of range for {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Shape("gather: empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// For `n` tables of shape `[K, s]` and `ids` laid out row-major as
    /// `[rows, n]`, concatenates the selected rows into `[rows, n * s]`.
    pub fn gather_concat(&mut self, tables: &[Var], ids: &[usize]) -> Result<Var> {
        let n = tables.len();
        if n == 0 || ids.is_empty() || ids.len() % n != 0 {
            return Err(Error::Shape(format!("gather_concat: {} ids for {n} tables", ids.len())));
        }
        let first = self.value(tables[0]).shape().to_vec();
        if first.len() != 2 || tables.iter().any(|&t| self.value(t).shape() != first) {
            return Err(Error::Shape("gather_concat: tables must share one rank-2 shape".into()));
        }
        let (k, s) = (first[0], first[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
            return Err(Error::Contract(format!("gather_concat: id {bad} out of range for {k} rows")));
        }
        let rows = ids.len() / n;
        let mut data = Vec::with_capacity(rows * n * s);
        for r in 0..rows {
            for (j, &t) in tables.iter().enumerate() {
                data.extend_from_slice(self.value(t).row(ids[r * n + j]));
            }
        }
        let out = Tensor::from_parts(vec![rows, n * s], data);
        Ok(self.push(out, Op::GatherConcat { tables: tables.to_vec(), ids: ids.to_vec() }, tables))
    }

    /// Mean negative log-likelihood of `targets` under `logits[.., V]`,
    /// skipping positions whose target is `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let t = self.value(logits);
        let v = *t.shape().last().ok_or_else(|| Error::Shape("cross_entropy on scalar".into()))?;
        let n = t.numel() / v;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for logits {:?}",
                targets.len(),
                t.shape()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!("cross_entropy: target {bad} >= vocab {v}")));
        }
        let rows: Vec<Option<usize>> = targets.iter().map(|&id| (id != pad_id).then_some(id)).collect();
        let count = rows.iter().flatten().count();
        if count == 0 {
            return Err(Error::Degenerate("cross_entropy over an all-pad batch".into()));
        }
        let x = t.data();
        let mut probs = vec![0.0; x.len()];
        let mut nll = 0.0;
        for (r, target) in rows.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            for j in 0..v {
                probs[r * v + j] = (row[j] - max).exp() / total;
            }
            if let Some(id) = *target {
                nll += total.ln() + max - row[id];
            }
        }
        let out = Tensor::scalar(nll / count as f64);
        Ok(self.push(out, Op::CrossEntropy { logits, rows, probs, count }, &[logits]))
    }

    /// Mean over axis 1 of `x[B, T, D]`, restricted to positions where
    /// `keep[b * T + t]` is true.
    pub fn masked_mean(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 || keep.len() != t.shape()[0] * t.shape()[1] {
            return Err(Error::Shape(format!(
                "masked_mean: mask of {} for states {:?}",
                keep.len(),
                t.shape()
            )));
        }
        let (b, tt, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut counts = vec![0; b];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for s in 0..tt {
                if keep[i * tt + s] {
                    counts[i] += 1;
                    let src = &t.data()[(i * tt + s) * d..(i * tt + s + 1) * d];
                    for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            if counts[i] == 0 {
                return Err(Error::Degenerate(format!("row {i} has no non-pad positions")));
            }
            for o in &mut out[i * d..(i + 1) * d] {
                *o /= counts[i] as f64;
            }
        }
        let out = Tensor::from_parts(vec![b, d], out);
        Ok(self.push(out, Op::MaskedMean { x, mask: keep.to_vec(), counts }, &[x]))
    }

    /// Per-column Pearson correlation across rows of `x[B, D]` and `y[B, D]`,
    /// averaged over the `D` columns. The denominator is
    /// `sqrt(max(Sxx * Syy, CORRELATION_EPS))`.
    pub fn correlation(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.shape() != ty.shape() || tx.rank() != 2 {
            return Err(shape_err("correlation", tx.shape(), ty.shape()));
        }
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        if rows < 2 {
            return Err(Error::Contract(format!("correlation needs at least 2 rows, got {rows}")));
        }
        let center = |t: &Tensor| {
            let mut c = t.data().to_vec();
            for j in 0..cols {
                let mu = (0..rows).map(|i| c[i * cols + j]).sum::<f64>() / rows as f64;
                for i in 0..rows {
                    c[i * cols + j] -= mu;
                }
            }
            c
        };
        let (cx, cy) = (center(tx), center(ty));
        let mut num = vec![0.0; cols];
        let mut sxx = vec![0.0; cols];
        let mut syy = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                let (a, b) = (cx[i * cols + j], cy[i * cols + j]);
                num[j] += a * b;
                sxx[j] += a * a;
                syy[j] += b * b;
            }
        }
        let mut guarded = vec![false; cols];
        let mut total = 0.0;
        for j in 0..cols {
            let q = sxx[j] * syy[j];
            guarded[j] = q <= CORRELATION_EPS;
            total += num[j] / q.max(CORRELATION_EPS).sqrt();
        }
        let out = Tensor::scalar(total / cols as f64);
        let saved = CorrelationSaved { x, y, rows, cols, cx, cy, num, sxx, syy, guarded };
        Ok(self.push(out, Op::Correlation(Box::new(saved)), &[x, y]))
    }

    /// Forward value is `replacement`; the backward pass hands the incoming
    /// gradient to `input` unchanged.
    pub fn straight_through(&mut self, input: Var, replacement: Tensor) -> Result<Var> {
        if self.value(input).shape() != replacement.shape() {
            return Err(shape_err("straight_through", self.value(input).shape(), replacement.shape()));
        }
        Ok(self.push(replacement, Op::StraightThrough(input), &[input]))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_parts(lt.shape().to_vec(), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, zip_map(g, val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, zip_map(g, val(*a), |x, y| x * y));
                }
            }
            Op::AddSuffix(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    let tb = val(*b);
                    let inner = tb.numel();
                    let mut gb = vec![0.0; inner];
                    for (i, &x) in g.data().iter().enumerate() {
                        gb[i % inner] += x;
                    }
                    acc(*b, Tensor::from_parts(tb.shape().to_vec(), gb));
                }
            }
            Op::Affine(a, mul) => {
                let mul = *mul;
                acc(*a, g.map(|x| x * mul));
            }
            Op::Relu(a) => acc(*a, zip_map(g, val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })),
            Op::Abs(a) => acc(*a, zip_map(g, val(*a), |gx, x| gx * signum0(x))),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let t = val(*a);
                acc(*a, Tensor::full(t.shape(), g.item() / t.numel() as f64));
            }
            Op::MaxAll { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                gx.data_mut()[*argmax] = g.item();
                acc(*x, gx);
            }
            Op::Reshape(a) => acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec())),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                acc(*a, permute_tensor(g, &inverse));
            }
            Op::MatMul(a, b, plan) => {
                let MatmulPlan { m, k, n, blocks } = plan;
                let (m, k, n) = (*m, *k, *n);
                let gd = g.data();
                if wants(*a) {
                    let ta = val(*a);
                    let bd = val(*b).data();
                    let mut ga = vec![0.0; ta.numel()];
                    for (i, &(ia, ib)) in blocks.iter().enumerate() {
                        // dA = dC * B^T
                        gemm(
                            m,
                            n,
                            k,
                            (&gd[i * m * n..(i + 1) * m * n], n, 1),
                            (&bd[ib * k * n..(ib + 1) * k * n], 1, n),
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                        );
                    }
                    acc(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
                }
                if wants(*b) {
                    let tb = val(*b);
                    let ad = val(*a).data();
                    let mut gb = vec![0.0; tb.numel()];
                    for (i, &(ia, ib)) in blocks.iter().enumerate() {
                        // dB = A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            (&ad[ia * m * k..(ia + 1) * m * k], 1, k),
                            (&gd[i * m * n..(i + 1) * m * n], n, 1),
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                        );
                    }
                    acc(*b, Tensor::from_parts(tb.shape().to_vec(), gb));
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = val(*gain);
                let d = tg.numel();
                let rows = rstd.len();
                let gd = g.data();
                if wants(*x) {
                    let mut gx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * tg.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gd[r * d + j] * tg.data()[j];
                            gx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), gx));
                }
                if wants(*gain) || wants(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gd[r * d + j] * xhat[r * d + j];
                            gb[j] += gd[r * d + j];
                        }
                    }
                    if wants(*gain) {
                        acc(*gain, Tensor::from_parts(vec![d], gg));
                    }
                    if wants(*bias) {
                        acc(*bias, Tensor::from_parts(vec![d], gb));
                    }
                }
            }
            Op::Gather { table, ids } => {
                let tt = val(*table);
                let d = tt.shape()[1];
                let mut gt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g.data()[r * d + j];
                    }
                }
                acc(*table, Tensor::from_parts(tt.shape().to_vec(), gt));
            }
            Op::GatherConcat { tables, ids } => {
                let n = tables.len();
                let shape = val(tables[0]).shape().to_vec();
                let s = shape[1];
                let rows = ids.len() / n;
                for (j, &t) in tables.iter().enumerate() {
                    if !wants(t) {
                        continue;
                    }
                    let mut gt = vec![0.0; shape[0] * s];
                    for r in 0..rows {
                        let id = ids[r * n + j];
                        let src = &g.data()[r * n * s + j * s..r * n * s + (j + 1) * s];
                        for (o, v) in gt[id * s..(id + 1) * s].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    acc(t, Tensor::from_parts(shape.clone(), gt));
                }
            }
            Op::CrossEntropy { logits, rows, probs, count } => {
                let tl = val(*logits);
                let v = *tl.shape().last().unwrap();
                let scale = g.item() / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, target) in rows.iter().enumerate() {
                    if let Some(id) = *target {
                        for j in 0..v {
                            gl[r * v + j] = probs[r * v + j] * scale;
                        }
                        gl[r * v + id] -= scale;
                    }
                }
                acc(*logits, Tensor::from_parts(tl.shape().to_vec(), gl));
            }
            Op::MaskedMean { x, mask, counts } => {
                let tx = val(*x);
                let (tt, d) = (tx.shape()[1], tx.shape()[2]);
                let mut gx = vec![0.0; tx.numel()];
                for (i, &c) in counts.iter().enumerate() {
                    for s in 0..tt {
                        if mask[i * tt + s] {
                            for j in 0..d {
                                gx[(i * tt + s) * d + j] = g.data()[i * d + j] / c as f64;
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::Correlation(saved) => {
                let CorrelationSaved { x, y, rows, cols, cx, cy, num, sxx, syy, guarded } = saved.as_ref();
                let (rows, cols) = (*rows, *cols);
                let scale = g.item() / cols as f64;
                let mut gx = vec![0.0; rows * cols];
                let mut gy = vec![0.0; rows * cols];
                for j in 0..cols {
                    let q = (sxx[j] * syy[j]).max(CORRELATION_EPS);
                    let r = q.sqrt();
                    let r3 = q * r;
                    for i in 0..rows {
                        let at = i * cols + j;
                        let (a, b) = (cx[at], cy[at]);
                        let (mut dx, mut dy) = (b / r, a / r);
                        if !guarded[j] {
                            dx -= num[j] * syy[j] * a / r3;
                            dy -= num[j] * sxx[j] * b / r3;
                        }
                        gx[at] = dx * scale;
                        gy[at] = dy * scale;
                    }
                }
                // Centering is a projection; project the gradient accordingly.
                let project = |gv: &mut [f64]| {
                    for j in 0..cols {
                        let mu = (0..rows).map(|i| gv[i * cols + j]).sum::<f64>() / rows as f64;
                        for i in 0..rows {
                            gv[i * cols + j] -= mu;
                        }
                    }
                };
                if wants(*x) {
                    project(&mut gx);
                    acc(*x, Tensor::from_parts(vec![rows, cols], gx));
                }
                if wants(*y) {
                    project(&mut gy);
                    acc(*y, Tensor::from_parts(vec![rows, cols], gy));
                }
            }
            Op::StraightThrough(input) => acc(*input, g.clone()),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| match (pad(a, i), pad(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn broadcast_blocks(out: &[usize], a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let total: usize = out.iter().product();
    let block_index = |s: &[usize], idx: &[usize]| {
        let off = out.len() - s.len();
        let mut lin = 0;
        for (i, &ext) in s.iter().enumerate() {
            let coord = if ext == 1 { 0 } else { idx[off + i] };
            lin = lin * ext + coord;
        }
        lin
    };
    let mut idx = vec![0usize; out.len()];
    let mut blocks = Vec::with_capacity(total);
    for _ in 0..total {
        blocks.push((block_index(a, &idx), block_index(b, &idx)));
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    blocks
}

/// `c += a * b` for an `m x k` and a `k x n` matrix given as
/// `(data, row_stride, col_stride)`; `c` is row-major `m x n`.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), c: &mut [f64]) {
    let (ad, rsa, csa) = a;
    let (bd, rsb, csb) = b;
    assert!(ad.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(bd.len() > (k - 1) * rsb + (n - 1) * csb);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every element address dgemm reads or
    // writes for these extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            ad.as_ptr(),
            rsa as isize,
            csa as isize,
            bd.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
