//! Reverse-mode automatic differentiation over [`Tensor`] matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a `1 x 1` result walks the record in reverse and
//! accumulates gradients for every node that depends on a parameter or on an
//! input created with [`Graph::input_with_grad`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Unfold {
        x: Var,
        width: usize,
        pad_left: usize,
    },
    MaxPool2(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Sum(Var),
    Gmm {
        mu: Var,
        sigma: Var,
        weight: Var,
        /// `resp[b][n * k + j]`: share of mixture `j` in the normalized weight
        /// at position `n`, i.e. `phi_bnj / S_b`.
        resp: Vec<Vec<f64>>,
    },
    Attend {
        weights: Var,
        memory: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Forward-pass recorder bound to one parameter store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Tensor>>,
    train: bool,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Graph<'a> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grads: Vec::new(),
            train: false,
            rng: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `rng`.
    pub fn training(store: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        g.train = true;
        g.rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar node");
        t.get(0, 0)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked and readable via [`Graph::grad`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(a), self.value(row), |x, y| x + y);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a (m x n) * row (1 x n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_rows(self.value(a), self.value(row), |x, y| x * y);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    /// Elementwise product with a constant (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        let ng = self.ng(a);
        self.push(value, Op::MulConst(a, c), ng)
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 - rate;
        let rng = self.rng.as_mut().expect("training graph owns an rng");
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(a, Tensor::from_vec(r, c, mask))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let w = t.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_vec(indices.len(), t.cols(), data);
        let ng = self.ng(table);
        self.push(value, Op::GatherRows(table, indices.to_vec()), ng)
    }

    /// Broadcast a `1 x n` row to `count x n`.
    pub fn repeat_rows(&mut self, row: Var, count: usize) -> Var {
        let t = self.value(row);
        assert_eq!(t.rows(), 1, "repeat_rows expects a single row");
        let mut data = Vec::with_capacity(count * t.cols());
        for _ in 0..count {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(count, t.cols(), data);
        let ng = self.ng(row);
        self.push(value, Op::RepeatRows(row), ng)
    }

    /// Sliding windows over rows for 1-D convolution (im2col).
    ///
    /// Output row `t` concatenates input rows `t - pad_left .. t - pad_left + width`,
    /// with zeros outside the input. The output has
    /// `rows + pad_left + pad_right - width + 1` rows.
    pub fn unfold(&mut self, x: Var, width: usize, pad_left: usize, pad_right: usize) -> Var {
        let t = self.value(x);
        let (rows, c) = t.shape();
        let out_rows = (rows + pad_left + pad_right + 1).saturating_sub(width);
        let mut out = Tensor::zeros(out_rows, width * c);
        for o in 0..out_rows {
            for j in 0..width {
                let src = o as isize + j as isize - pad_left as isize;
                if src >= 0 && (src as usize) < rows {
                    out.row_mut(o)[j * c..(j + 1) * c].copy_from_slice(t.row(src as usize));
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::Unfold {
                x,
                width,
                pad_left,
            },
            ng,
        )
    }

    /// Max over each row and its successor (width 2, stride 1); the last row
    /// passes through, so the length is preserved.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut src = vec![0usize; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let a = t.get(r, c);
                let (v, s) = if r + 1 < rows && t.get(r + 1, c) > a {
                    (t.get(r + 1, c), r + 1)
                } else {
                    (a, r)
                };
                out.set(r, c, v);
                src[r * cols + c] = s;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxPool2(x, src), ng)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mixture-of-Gaussians attention weights over memory positions.
    ///
    /// `mu`, `sigma`, `weight` are `B x K`. Row `b` of the `B x max_len`
    /// output is `sum_k w_k exp(-(n - mu_k)^2 / (2 sigma_k^2))` renormalized
    /// over `n < lengths[b]`; positions past `lengths[b]` get zero.
    pub fn gmm_weights(&mut self, mu: Var, sigma: Var, weight: Var, lengths: &[usize]) -> Var {
        let (b, k) = self.shape(mu);
        assert_eq!(self.shape(sigma), (b, k));
        assert_eq!(self.shape(weight), (b, k));
        assert_eq!(lengths.len(), b);
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let (m, s, w) = (self.value(mu), self.value(sigma), self.value(weight));
        let mut out = Tensor::zeros(b, max_len);
        let mut resp = Vec::with_capacity(b);
        for bi in 0..b {
            let len = lengths[bi];
            let mut logits = vec![f64::NEG_INFINITY; len * k];
            let mut top = f64::NEG_INFINITY;
            for n in 0..len {
                for j in 0..k {
                    let d = n as f64 - m.get(bi, j);
                    let sj = s.get(bi, j);
                    let l = w.get(bi, j).ln() - d * d / (2.0 * sj * sj);
                    logits[n * k + j] = l;
                    top = top.max(l);
                }
            }
            let mut total = 0.0;
            for l in &mut logits {
                *l = (*l - top).exp();
                total += *l;
            }
            for l in &mut logits {
                *l /= total;
            }
            for n in 0..len {
                let a: f64 = logits[n * k..(n + 1) * k].iter().sum();
                out.set(bi, n, a);
            }
            resp.push(logits);
        }
        let ng = self.ng(mu) || self.ng(sigma) || self.ng(weight);
        self.push(
            out,
            Op::Gmm {
                mu,
                sigma,
                weight,
                resp,
            },
            ng,
        )
    }

    /// Batched context vectors: `weights` is `B x L`, `memory` is `(B * L) x D`
    /// with utterance `b` occupying rows `b * L .. (b + 1) * L`. Output `B x D`.
    pub fn attend(&mut self, weights: Var, memory: Var) -> Var {
        let w = self.value(weights);
        let mem = self.value(memory);
        let (b, l) = w.shape();
        assert_eq!(mem.rows(), b * l, "attend: memory rows must be batch * max_len");
        let d = mem.cols();
        let mut out = Tensor::zeros(b, d);
        for bi in 0..b {
            let orow = out.row_mut(bi);
            for n in 0..l {
                let a = w.get(bi, n);
                if a == 0.0 {
                    continue;
                }
                for (o, v) in orow.iter_mut().zip(mem.row(bi * l + n)) {
                    *o += a * v;
                }
            }
        }
        let ng = self.ng(weights) || self.ng(memory);
        self.push(out, Op::Attend { weights, memory }, ng)
    }

    /// Gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of all parameters touched by the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.grads.get(v.0)?.as_ref()?;
                Some((ParamId::from_index(i), g.clone()))
            })
            .collect()
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be 1x1");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(1, 1, 1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let ng = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    let dst = grad_slot(grads, *a, val(*a));
                    gemm(g, false, val(*b), true, dst, 1.0);
                }
                if ng(*b) {
                    let dst = grad_slot(grads, *b, val(*b));
                    gemm(val(*a), true, g, false, dst, 1.0);
                }
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    acc(grads, *a, val(*a), g.data().iter().copied());
                }
                if ng(*b) {
                    acc(grads, *b, val(*b), g.data().iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    acc(grads, *a, val(*a), g.data().iter().copied());
                }
                if ng(*b) {
                    acc(grads, *b, val(*b), g.data().iter().map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let bv = val(*b).data();
                    acc(grads, *a, val(*a), g.data().iter().zip(bv).map(|(x, y)| x * y));
                }
                if ng(*b) {
                    let av = val(*a).data();
                    acc(grads, *b, val(*b), g.data().iter().zip(av).map(|(x, y)| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if ng(*a) {
                    acc(grads, *a, val(*a), g.data().iter().copied());
                }
                if ng(*row) {
                    let dst = grad_slot(grads, *row, val(*row));
                    for r in 0..g.rows() {
                        for (d, x) in dst.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if ng(*a) {
                    let cols = rv.cols();
                    acc(
                        grads,
                        *a,
                        val(*a),
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(k, x)| x * rv.data()[k % cols]),
                    );
                }
                if ng(*row) {
                    let av = val(*a);
                    let dst = grad_slot(grads, *row, rv);
                    for r in 0..g.rows() {
                        for ((d, x), y) in dst.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *d += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                acc(grads, *a, val(*a), g.data().iter().map(|x| x * s));
            }
            Op::AddScalar(a) => {
                acc(grads, *a, val(*a), g.data().iter().copied());
            }
            Op::MulConst(a, c) => {
                acc(grads, *a, val(*a), g.data().iter().zip(c.data()).map(|(x, y)| x * y));
            }
            Op::Relu(a) => {
                let out = node.value.data();
                acc(
                    grads,
                    *a,
                    val(*a),
                    g.data()
                        .iter()
                        .zip(out)
                        .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 }),
                );
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                acc(grads, *a, val(*a), g.data().iter().zip(out).map(|(x, y)| x * (1.0 - y * y)));
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc(grads, *a, val(*a), g.data().iter().zip(out).map(|(x, y)| x * y * (1.0 - y)));
            }
            Op::Softplus(a) => {
                let inp = val(*a).data();
                acc(grads, *a, val(*a), g.data().iter().zip(inp).map(|(x, y)| x * sigmoid(*y)));
            }
            Op::Exp(a) => {
                let out = node.value.data();
                acc(grads, *a, val(*a), g.data().iter().zip(out).map(|(x, y)| x * y));
            }
            Op::Abs(a) => {
                let inp = val(*a).data();
                acc(grads, *a, val(*a), g.data().iter().zip(inp).map(|(x, y)| x * sign(*y)));
            }
            Op::Square(a) => {
                let inp = val(*a).data();
                acc(grads, *a, val(*a), g.data().iter().zip(inp).map(|(x, y)| 2.0 * x * y));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if ng(*p) {
                        let dst = grad_slot(grads, *p, val(*p));
                        for r in 0..g.rows() {
                            for (d, x) in dst.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *d += x;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    if ng(*p) {
                        acc(grads, *p, val(*p), g.data()[off..off + len].iter().copied());
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let dst = grad_slot(grads, *a, val(*a));
                let w = g.cols();
                for r in 0..g.rows() {
                    for (d, x) in dst.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let dst = grad_slot(grads, *a, val(*a));
                let c = g.cols();
                for (d, x) in dst.data_mut()[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g.data())
                {
                    *d += x;
                }
            }
            Op::GatherRows(table, indices) => {
                let dst = grad_slot(grads, *table, val(*table));
                for (r, &i) in indices.iter().enumerate() {
                    for (d, x) in dst.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::RepeatRows(row) => {
                let dst = grad_slot(grads, *row, val(*row));
                for r in 0..g.rows() {
                    for (d, x) in dst.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::Unfold {
                x,
                width,
                pad_left,
            } => {
                let xv = val(*x);
                let (rows, c) = xv.shape();
                let dst = grad_slot(grads, *x, xv);
                for o in 0..g.rows() {
                    for j in 0..*width {
                        let src = o as isize + j as isize - *pad_left as isize;
                        if src >= 0 && (src as usize) < rows {
                            let grow = &g.row(o)[j * c..(j + 1) * c];
                            for (d, v) in dst.row_mut(src as usize).iter_mut().zip(grow) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::MaxPool2(x, src) => {
                let cols = g.cols();
                let dst = grad_slot(grads, *x, val(*x));
                for r in 0..g.rows() {
                    for c in 0..cols {
                        let s = src[r * cols + c];
                        let cur = dst.get(s, c);
                        dst.set(s, c, cur + g.get(r, c));
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let cols = y.cols() as f64;
                let dst = grad_slot(grads, *x, val(*x));
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.iter().sum::<f64>() / cols;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((d, gv), yv) in dst.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let dst = grad_slot(grads, *x, val(*x));
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dst.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.get(0, 0);
                let len = val(*a).len();
                acc(grads, *a, val(*a), std::iter::repeat_n(s, len));
            }
            Op::Gmm {
                mu,
                sigma,
                weight,
                resp,
            } => {
                let (b, k) = val(*mu).shape();
                let (mv, sv, wv) = (val(*mu), val(*sigma), val(*weight));
                let mut gmu = Tensor::zeros(b, k);
                let mut gsig = Tensor::zeros(b, k);
                let mut gw = Tensor::zeros(b, k);
                for bi in 0..b {
                    let r = &resp[bi];
                    let len = r.len() / k;
                    let alpha = node.value.row(bi);
                    let grow = g.row(bi);
                    let dot: f64 = (0..len).map(|n| grow[n] * alpha[n]).sum();
                    for n in 0..len {
                        let c = grow[n] - dot;
                        if c == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let q = r[n * k + j];
                            if q == 0.0 {
                                continue;
                            }
                            let s = sv.get(bi, j);
                            let d = n as f64 - mv.get(bi, j);
                            let cq = c * q;
                            gw.data_mut()[bi * k + j] += cq / wv.get(bi, j);
                            gmu.data_mut()[bi * k + j] += cq * d / (s * s);
                            gsig.data_mut()[bi * k + j] += cq * d * d / (s * s * s);
                        }
                    }
                }
                if ng(*mu) {
                    acc(grads, *mu, mv, gmu.data().iter().copied());
                }
                if ng(*sigma) {
                    acc(grads, *sigma, sv, gsig.data().iter().copied());
                }
                if ng(*weight) {
                    acc(grads, *weight, wv, gw.data().iter().copied());
                }
            }
            Op::Attend { weights, memory } => {
                let w = val(*weights);
                let mem = val(*memory);
                let (b, l) = w.shape();
                if ng(*weights) {
                    let mut gw = Tensor::zeros(b, l);
                    for bi in 0..b {
                        for n in 0..l {
                            let dot: f64 = g.row(bi).iter().zip(mem.row(bi * l + n)).map(|(x, y)| x * y).sum();
                            gw.set(bi, n, dot);
                        }
                    }
                    acc(grads, *weights, w, gw.data().iter().copied());
                }
                if ng(*memory) {
                    let dst = grad_slot(grads, *memory, mem);
                    for bi in 0..b {
                        for n in 0..l {
                            let a = w.get(bi, n);
                            if a == 0.0 {
                                continue;
                            }
                            for (d, x) in dst.row_mut(bi * l + n).iter_mut().zip(g.row(bi)) {
                                *d += a * x;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

fn acc(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, src: impl Iterator<Item = f64>) {
    let dst = grad_slot(grads, v, like);
    for (d, x) in dst.data_mut().iter_mut().zip(src) {
        *d += x;
    }
}

fn broadcast_rows(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(row.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(a.cols(), row.cols(), "broadcast column mismatch");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, y) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o = f(*o, *y);
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - top).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut r = rng();
        let x = Tensor::randn(3, 4, 1.0, &mut r);
        let y = Tensor::randn(3, 4, 1.0, &mut r);
        let row = Tensor::randn(1, 4, 1.0, &mut r);
        let report = check_input_gradient(&x, 1e-5, |g, v| {
            let yv = g.constant(y.clone());
            let rv = g.constant(row.clone());
            let a = g.mul(v, yv);
            let b = g.tanh(a);
            let c = g.sigmoid(v);
            let d = g.softplus(c);
            let e = g.add_row(d, rv);
            let f = g.mul_row(e, rv);
            let h = g.sub(b, f);
            let i = g.square(h);
            let j = g.exp(b);
            let k = g.add(i, j);
            let l = g.abs(k);
            g.mean(l)
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn structural_ops_gradients() {
        let mut r = rng();
        let x = Tensor::randn(5, 3, 1.0, &mut r);
        let w = Tensor::randn(6, 2, 1.0, &mut r);
        let report = check_input_gradient(&x, 1e-5, |g, v| {
            let u = g.unfold(v, 2, 1, 0);
            let wv = g.constant(w.clone());
            let c = g.matmul(u, wv);
            let p = g.max_pool2(c);
            let n = g.layer_norm(p, 1e-5);
            let s = g.softmax_rows(n);
            let a = g.slice_cols(s, 0, 1);
            let b = g.slice_rows(v, 1, 4);
            let b2 = g.sum(b);
            let rep = g.repeat_rows(b2, 5);
            let cat = g.concat_cols(&[a, rep]);
            let gat = g.gather_rows(cat, &[0, 2, 2, 4]);
            let sq = g.square(gat);
            let rows = g.concat_rows(&[sq, gat]);
            g.sum(rows)
        });
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn gmm_and_attend_gradients() {
        let mut r = rng();
        let lengths = [4usize, 6];
        let mem = Tensor::randn(12, 3, 1.0, &mut r);
        let mu0 = Tensor::from_rows(&[vec![1.0, 2.5], vec![0.5, 3.0]]);
        let sig0 = Tensor::from_rows(&[vec![0.8, 1.3], vec![1.1, 0.6]]);
        let w0 = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]);
        let probe = Tensor::randn(2, 3, 1.0, &mut r);
        for which in 0..4 {
            let base = [&mu0, &sig0, &w0, &mem][which].clone();
            let report = check_input_gradient(&base, 1e-6, |g, v| {
                let pick = |g: &mut Graph, i: usize, t: &Tensor| {
                    if i == which {
                        v
                    } else {
                        g.constant(t.clone())
                    }
                };
                let m = pick(g, 0, &mu0);
                let s = pick(g, 1, &sig0);
                let w = pick(g, 2, &w0);
                let me = pick(g, 3, &mem);
                let a = g.gmm_weights(m, s, w, &lengths);
                let ctx = g.attend(a, me);
                let pv = g.constant(probe.clone());
                let prod = g.mul(ctx, pv);
                g.sum(prod)
            });
            assert!(report.max_rel_err < 1e-5, "input {which}: {report:?}");
        }
    }

    #[test]
    fn gmm_rows_sum_to_one_and_mask_padding() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let mu = g.constant(Tensor::from_rows(&[vec![40.0], vec![1.0]]));
        let s = g.constant(Tensor::from_rows(&[vec![0.1], vec![2.0]]));
        let w = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
        let a = g.gmm_weights(mu, s, w, &[3, 5]);
        let out = g.value(a);
        assert_eq!(out.shape(), (2, 5));
        for r in 0..2 {
            assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // far-away mean still yields a proper distribution concentrated at the end
        assert!((out.get(0, 2) - 1.0).abs() < 1e-9);
        assert_eq!(out.get(0, 3), 0.0);
        assert_eq!(out.get(0, 4), 0.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(softplus_inverse(0.3)) - 0.3).abs() < 1e-12);
    }
}
