//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! The models in this crate are built from matrix products, elementwise
//! nonlinearities and irregular gather/segment reductions over point
//! neighborhoods. A small tape with exactly those ops keeps the whole
//! pipeline in double precision (the finite-difference test suite depends on
//! that) and keeps every reduction order fixed, so forward and backward
//! passes are bit-reproducible.
//!
//! Usage: build a [`Tape`], insert inputs with [`Tape::leaf`] (gradients
//! wanted) or [`Tape::constant`], chain ops, then call [`Tape::backward`] on
//! a scalar output. Ops panic on shape mismatches; shape errors are
//! programming errors here, not runtime conditions.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_points(points: &[nalgebra::Vector3<f64>]) -> Self {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.extend_from_slice(&[p.x, p.y, p.z]);
        }
        Self {
            rows: points.len(),
            cols: 3,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn row_vector3(&self, r: usize) -> nalgebra::Vector3<f64> {
        assert_eq!(self.cols, 3);
        let s = self.row(r);
        nalgebra::Vector3::new(s[0], s[1], s[2])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a tape entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

// Some variants carry forward-only metadata (step sizes, output shapes) that
// the backward pass recomputes from values; keep them for debuggability.
#[allow(dead_code)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBiasRow(usize, usize),
    MulBiasRow(usize, usize),
    MulColBroadcast(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    Square(usize),
    SqrtEps(usize, f64),
    RecipEps(usize, f64),
    GatherRows(usize, Rc<Vec<usize>>),
    SegmentSum(usize, Rc<Vec<usize>>, usize),
    SegmentSoftmax(usize, Rc<Vec<usize>>),
    SumRows(usize),
    SumAll(usize),
    MeanAll(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    RepeatRow(usize, usize),
    GroupNorm(usize, usize, f64),
}

struct Node {
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. One tape per forward pass (or per training rollout).
#[derive(Default)]
pub struct Tape {
    vals: RefCell<Vec<Tensor>>,
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to leaf variables.
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked input: gradients will be available after `backward`.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked input.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    pub fn val(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.vals.borrow(), |vals| &vals[v.0])
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.vals.borrow()[v.0].clone()
    }

    fn push(&self, t: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut vals = self.vals.borrow_mut();
        let mut nodes = self.nodes.borrow_mut();
        vals.push(t);
        nodes.push(Node { op, requires_grad });
        Var(vals.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var {
        let out = f(&self.vals.borrow()[a.0]);
        let rg = self.req(a);
        self.push(out, op, rg)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var {
        let out = {
            let vals = self.vals.borrow();
            f(&vals[a.0], &vals[b.0])
        };
        let rg = self.req(a) || self.req(b);
        self.push(out, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul(a.0, b.0), |x, y| {
            assert_eq!(x.cols, y.rows, "matmul inner dims");
            let mut out = Tensor::zeros(x.rows, y.cols);
            matmul_nn(x, y, &mut out);
            out
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| {
            assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape");
            let mut out = x.clone();
            out.add_assign(y);
            out
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| {
            assert_eq!((x.rows, x.cols), (y.rows, y.cols), "sub shape");
            let mut out = x.clone();
            for (o, v) in out.data.iter_mut().zip(&y.data) {
                *o -= v;
            }
            out
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| {
            assert_eq!((x.rows, x.cols), (y.rows, y.cols), "mul shape");
            let mut out = x.clone();
            for (o, v) in out.data.iter_mut().zip(&y.data) {
                *o *= v;
            }
            out
        })
    }

    /// `x (N×C) + bias (1×C)` broadcast over rows.
    pub fn add_bias_row(&self, x: Var, bias: Var) -> Var {
        self.binary(x, bias, Op::AddBiasRow(x.0, bias.0), |x, b| {
            assert_eq!(b.rows, 1);
            assert_eq!(x.cols, b.cols, "bias width");
            let mut out = x.clone();
            for r in 0..x.rows {
                for c in 0..x.cols {
                    out.data[r * x.cols + c] += b.data[c];
                }
            }
            out
        })
    }

    /// `x (N×C) ∘ gain (1×C)` broadcast over rows.
    pub fn mul_bias_row(&self, x: Var, gain: Var) -> Var {
        self.binary(x, gain, Op::MulBiasRow(x.0, gain.0), |x, g| {
            assert_eq!(g.rows, 1);
            assert_eq!(x.cols, g.cols);
            let mut out = x.clone();
            for r in 0..x.rows {
                for c in 0..x.cols {
                    out.data[r * x.cols + c] *= g.data[c];
                }
            }
            out
        })
    }

    /// `x (N×C) ∘ s (N×1)` broadcast over columns.
    pub fn mul_col(&self, x: Var, s: Var) -> Var {
        self.binary(x, s, Op::MulColBroadcast(x.0, s.0), |x, s| {
            assert_eq!(s.cols, 1);
            assert_eq!(x.rows, s.rows);
            let mut out = x.clone();
            for r in 0..x.rows {
                let f = s.data[r];
                for c in 0..x.cols {
                    out.data[r * x.cols + c] *= f;
                }
            }
            out
        })
    }

    pub fn scale(&self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x.0, k), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                *v *= k;
            }
            out
        })
    }

    pub fn add_scalar(&self, x: Var, k: f64) -> Var {
        self.unary(x, Op::AddScalar(x.0, k), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                *v += k;
            }
            out
        })
    }

    pub fn leaky_relu(&self, x: Var, alpha: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x.0, alpha), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                if *v < 0.0 {
                    *v *= alpha;
                }
            }
            out
        })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.0), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                *v = v.tanh();
            }
            out
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
            out
        })
    }

    /// `ln(1 + e^x)`, computed as `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x.0), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                *v = v.max(0.0) + (-v.abs()).exp().ln_1p();
            }
            out
        })
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, Op::Abs(x.0), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                *v = v.abs();
            }
            out
        })
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Op::Square(x.0), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                *v *= *v;
            }
            out
        })
    }

    pub fn sqrt_eps(&self, x: Var, eps: f64) -> Var {
        self.unary(x, Op::SqrtEps(x.0, eps), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                *v = (*v + eps).sqrt();
            }
            out
        })
    }

    pub fn recip_eps(&self, x: Var, eps: f64) -> Var {
        self.unary(x, Op::RecipEps(x.0, eps), |x| {
            let mut out = x.clone();
            for v in out.data.iter_mut() {
                *v = 1.0 / (*v + eps);
            }
            out
        })
    }

    /// Select rows by index; indices may repeat.
    pub fn gather_rows(&self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let idx2 = idx.clone();
        self.unary(x, Op::GatherRows(x.0, idx), move |x| {
            let mut out = Tensor::zeros(idx2.len(), x.cols);
            for (r, &i) in idx2.iter().enumerate() {
                out.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(x.row(i));
            }
            out
        })
    }

    /// Scatter-add rows into `out_rows` buckets: `out[seg[i]] += x[i]`.
    pub fn segment_sum(&self, x: Var, seg: Rc<Vec<usize>>, out_rows: usize) -> Var {
        let seg2 = seg.clone();
        self.unary(x, Op::SegmentSum(x.0, seg, out_rows), move |x| {
            assert_eq!(seg2.len(), x.rows);
            let mut out = Tensor::zeros(out_rows, x.cols);
            for (r, &s) in seg2.iter().enumerate() {
                debug_assert!(s < out_rows);
                for c in 0..x.cols {
                    out.data[s * x.cols + c] += x.data[r * x.cols + c];
                }
            }
            out
        })
    }

    /// Softmax over rows of an `N×1` score column, grouped by segment id.
    pub fn segment_softmax(&self, x: Var, seg: Rc<Vec<usize>>) -> Var {
        let seg2 = seg.clone();
        self.unary(x, Op::SegmentSoftmax(x.0, seg), move |x| {
            assert_eq!(x.cols, 1);
            assert_eq!(seg2.len(), x.rows);
            segment_softmax_forward(x, &seg2)
        })
    }

    /// `N×C → N×1` row sums.
    pub fn sum_rows(&self, x: Var) -> Var {
        self.unary(x, Op::SumRows(x.0), |x| {
            let mut out = Tensor::zeros(x.rows, 1);
            for r in 0..x.rows {
                out.data[r] = x.row(r).iter().sum();
            }
            out
        })
    }

    pub fn sum_all(&self, x: Var) -> Var {
        self.unary(x, Op::SumAll(x.0), |x| Tensor::scalar(x.data.iter().sum()))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        self.unary(x, Op::MeanAll(x.0), |x| {
            Tensor::scalar(x.data.iter().sum::<f64>() / x.data.len() as f64)
        })
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let out = {
            let vals = self.vals.borrow();
            let rows = vals[parts[0].0].rows;
            let cols: usize = parts.iter().map(|v| vals[v.0].cols).sum();
            let mut out = Tensor::zeros(rows, cols);
            let mut at = 0;
            for v in parts {
                let t = &vals[v.0];
                assert_eq!(t.rows, rows, "concat_cols row mismatch");
                for r in 0..rows {
                    out.data[r * cols + at..r * cols + at + t.cols].copy_from_slice(t.row(r));
                }
                at += t.cols;
            }
            out
        };
        let rg = parts.iter().any(|&v| self.req(v));
        self.push(out, Op::ConcatCols(parts.iter().map(|v| v.0).collect()), rg)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let out = {
            let vals = self.vals.borrow();
            let cols = vals[parts[0].0].cols;
            let rows: usize = parts.iter().map(|v| vals[v.0].rows).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for v in parts {
                let t = &vals[v.0];
                assert_eq!(t.cols, cols, "concat_rows col mismatch");
                data.extend_from_slice(&t.data);
            }
            Tensor::from_vec(rows, cols, data)
        };
        let rg = parts.iter().any(|&v| self.req(v));
        self.push(out, Op::ConcatRows(parts.iter().map(|v| v.0).collect()), rg)
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        self.unary(x, Op::SliceCols(x.0, start, len), |x| {
            assert!(start + len <= x.cols);
            let mut out = Tensor::zeros(x.rows, len);
            for r in 0..x.rows {
                out.data[r * len..(r + 1) * len]
                    .copy_from_slice(&x.row(r)[start..start + len]);
            }
            out
        })
    }

    /// `1×C → n×C`.
    pub fn repeat_row(&self, x: Var, n: usize) -> Var {
        self.unary(x, Op::RepeatRow(x.0, n), |x| {
            assert_eq!(x.rows, 1);
            let mut data = Vec::with_capacity(n * x.cols);
            for _ in 0..n {
                data.extend_from_slice(&x.data);
            }
            Tensor::from_vec(n, x.cols, data)
        })
    }

    /// Per-row group normalization (no affine): each row is split into
    /// `groups` equal channel groups, normalized to zero mean / unit variance.
    pub fn group_norm(&self, x: Var, groups: usize, eps: f64) -> Var {
        self.unary(x, Op::GroupNorm(x.0, groups, eps), |x| {
            assert_eq!(x.cols % groups, 0, "channels not divisible by groups");
            group_norm_forward(x, groups, eps)
        })
    }

    /// Backpropagate from a scalar loss, returning leaf gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let vals = self.vals.borrow();
        let nodes = self.nodes.borrow();
        assert_eq!(vals[loss.0].data.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; vals.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf | Op::Const) {
                continue;
            }
            let g = grads[i].take().unwrap();
            backprop_op(&nodes[i].op, &g, &vals, i, &mut grads);
        }
        Gradients { grads }
    }
}

fn add_grad(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

fn backprop_op(op: &Op, g: &Tensor, vals: &[Tensor], out_idx: usize, grads: &mut [Option<Tensor>]) {
    match op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&vals[*a], &vals[*b]);
            let mut ga = Tensor::zeros(ta.rows, ta.cols);
            matmul_nt(g, tb, &mut ga);
            add_grad(grads, *a, ga);
            let mut gb = Tensor::zeros(tb.rows, tb.cols);
            matmul_tn(ta, g, &mut gb);
            add_grad(grads, *b, gb);
        }
        Op::Add(a, b) => {
            add_grad(grads, *a, g.clone());
            add_grad(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            add_grad(grads, *a, g.clone());
            let mut gb = g.clone();
            for v in gb.data.iter_mut() {
                *v = -*v;
            }
            add_grad(grads, *b, gb);
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&vals[*a], &vals[*b]);
            let mut ga = g.clone();
            for (v, w) in ga.data.iter_mut().zip(&tb.data) {
                *v *= w;
            }
            add_grad(grads, *a, ga);
            let mut gb = g.clone();
            for (v, w) in gb.data.iter_mut().zip(&ta.data) {
                *v *= w;
            }
            add_grad(grads, *b, gb);
        }
        Op::AddBiasRow(x, b) => {
            add_grad(grads, *x, g.clone());
            let cols = g.cols;
            let mut gb = Tensor::zeros(1, cols);
            for r in 0..g.rows {
                for c in 0..cols {
                    gb.data[c] += g.data[r * cols + c];
                }
            }
            add_grad(grads, *b, gb);
        }
        Op::MulBiasRow(x, b) => {
            let (tx, tb) = (&vals[*x], &vals[*b]);
            let cols = g.cols;
            let mut gx = g.clone();
            for r in 0..g.rows {
                for c in 0..cols {
                    gx.data[r * cols + c] *= tb.data[c];
                }
            }
            add_grad(grads, *x, gx);
            let mut gb = Tensor::zeros(1, cols);
            for r in 0..g.rows {
                for c in 0..cols {
                    gb.data[c] += g.data[r * cols + c] * tx.data[r * cols + c];
                }
            }
            add_grad(grads, *b, gb);
        }
        Op::MulColBroadcast(x, s) => {
            let (tx, ts) = (&vals[*x], &vals[*s]);
            let cols = g.cols;
            let mut gx = g.clone();
            for r in 0..g.rows {
                for c in 0..cols {
                    gx.data[r * cols + c] *= ts.data[r];
                }
            }
            add_grad(grads, *x, gx);
            let mut gs = Tensor::zeros(g.rows, 1);
            for r in 0..g.rows {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += g.data[r * cols + c] * tx.data[r * cols + c];
                }
                gs.data[r] = acc;
            }
            add_grad(grads, *s, gs);
        }
        Op::Scale(x, k) => {
            let mut gx = g.clone();
            for v in gx.data.iter_mut() {
                *v *= k;
            }
            add_grad(grads, *x, gx);
        }
        Op::AddScalar(x, _) => add_grad(grads, *x, g.clone()),
        Op::LeakyRelu(x, alpha) => {
            let tx = &vals[*x];
            let mut gx = g.clone();
            for (v, inp) in gx.data.iter_mut().zip(&tx.data) {
                if *inp < 0.0 {
                    *v *= alpha;
                }
            }
            add_grad(grads, *x, gx);
        }
        Op::Tanh(x) => {
            let out = &vals[out_idx];
            let mut gx = g.clone();
            for (v, y) in gx.data.iter_mut().zip(&out.data) {
                *v *= 1.0 - y * y;
            }
            add_grad(grads, *x, gx);
        }
        Op::Sigmoid(x) => {
            let out = &vals[out_idx];
            let mut gx = g.clone();
            for (v, y) in gx.data.iter_mut().zip(&out.data) {
                *v *= y * (1.0 - y);
            }
            add_grad(grads, *x, gx);
        }
        Op::Softplus(x) => {
            let tx = &vals[*x];
            let mut gx = g.clone();
            for (v, inp) in gx.data.iter_mut().zip(&tx.data) {
                *v *= 1.0 / (1.0 + (-inp).exp());
            }
            add_grad(grads, *x, gx);
        }
        Op::Abs(x) => {
            let tx = &vals[*x];
            let mut gx = g.clone();
            for (v, inp) in gx.data.iter_mut().zip(&tx.data) {
                *v *= if *inp > 0.0 {
                    1.0
                } else if *inp < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            add_grad(grads, *x, gx);
        }
        Op::Square(x) => {
            let tx = &vals[*x];
            let mut gx = g.clone();
            for (v, inp) in gx.data.iter_mut().zip(&tx.data) {
                *v *= 2.0 * inp;
            }
            add_grad(grads, *x, gx);
        }
        Op::SqrtEps(x, _) => {
            let out = &vals[out_idx];
            let mut gx = g.clone();
            for (v, y) in gx.data.iter_mut().zip(&out.data) {
                *v *= 0.5 / y;
            }
            add_grad(grads, *x, gx);
        }
        Op::RecipEps(x, _) => {
            let out = &vals[out_idx];
            let mut gx = g.clone();
            for (v, y) in gx.data.iter_mut().zip(&out.data) {
                *v *= -(y * y);
            }
            add_grad(grads, *x, gx);
        }
        Op::GatherRows(x, idx) => {
            let tx = &vals[*x];
            let mut gx = Tensor::zeros(tx.rows, tx.cols);
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..g.cols {
                    gx.data[i * g.cols + c] += g.data[r * g.cols + c];
                }
            }
            add_grad(grads, *x, gx);
        }
        Op::SegmentSum(x, seg, _) => {
            let tx = &vals[*x];
            let mut gx = Tensor::zeros(tx.rows, tx.cols);
            for (r, &s) in seg.iter().enumerate() {
                gx.data[r * g.cols..(r + 1) * g.cols].copy_from_slice(g.row(s));
            }
            add_grad(grads, *x, gx);
        }
        Op::SegmentSoftmax(x, seg) => {
            let y = &vals[out_idx];
            let nseg = seg.iter().copied().max().map_or(0, |m| m + 1);
            let mut dot = vec![0.0; nseg];
            for r in 0..y.rows {
                dot[seg[r]] += y.data[r] * g.data[r];
            }
            let mut gx = Tensor::zeros(y.rows, 1);
            for r in 0..y.rows {
                gx.data[r] = y.data[r] * (g.data[r] - dot[seg[r]]);
            }
            add_grad(grads, *x, gx);
        }
        Op::SumRows(x) => {
            let tx = &vals[*x];
            let mut gx = Tensor::zeros(tx.rows, tx.cols);
            for r in 0..tx.rows {
                for c in 0..tx.cols {
                    gx.data[r * tx.cols + c] = g.data[r];
                }
            }
            add_grad(grads, *x, gx);
        }
        Op::SumAll(x) => {
            let tx = &vals[*x];
            add_grad(grads, *x, Tensor::filled(tx.rows, tx.cols, g.data[0]));
        }
        Op::MeanAll(x) => {
            let tx = &vals[*x];
            let v = g.data[0] / tx.data.len() as f64;
            add_grad(grads, *x, Tensor::filled(tx.rows, tx.cols, v));
        }
        Op::ConcatCols(parts) => {
            let mut at = 0;
            for &p in parts {
                let tp = &vals[p];
                let mut gp = Tensor::zeros(tp.rows, tp.cols);
                for r in 0..tp.rows {
                    gp.data[r * tp.cols..(r + 1) * tp.cols]
                        .copy_from_slice(&g.row(r)[at..at + tp.cols]);
                }
                at += tp.cols;
                add_grad(grads, p, gp);
            }
        }
        Op::ConcatRows(parts) => {
            let mut at = 0;
            for &p in parts {
                let tp = &vals[p];
                let gp = Tensor::from_vec(
                    tp.rows,
                    tp.cols,
                    g.data[at * g.cols..(at + tp.rows) * g.cols].to_vec(),
                );
                at += tp.rows;
                add_grad(grads, p, gp);
            }
        }
        Op::SliceCols(x, start, len) => {
            let tx = &vals[*x];
            let mut gx = Tensor::zeros(tx.rows, tx.cols);
            for r in 0..tx.rows {
                gx.data[r * tx.cols + start..r * tx.cols + start + len]
                    .copy_from_slice(g.row(r));
            }
            add_grad(grads, *x, gx);
        }
        Op::RepeatRow(x, n) => {
            let cols = g.cols;
            let mut gx = Tensor::zeros(1, cols);
            for r in 0..*n {
                for c in 0..cols {
                    gx.data[c] += g.data[r * cols + c];
                }
            }
            add_grad(grads, *x, gx);
        }
        Op::GroupNorm(x, groups, eps) => {
            let tx = &vals[*x];
            let y = &vals[out_idx];
            add_grad(grads, *x, group_norm_backward(tx, y, g, *groups, *eps));
        }
    }
}

fn segment_softmax_forward(x: &Tensor, seg: &[usize]) -> Tensor {
    let nseg = seg.iter().copied().max().map_or(0, |m| m + 1);
    let mut maxes = vec![f64::NEG_INFINITY; nseg];
    for (r, &s) in seg.iter().enumerate() {
        maxes[s] = maxes[s].max(x.data[r]);
    }
    let mut out = Tensor::zeros(x.rows, 1);
    let mut sums = vec![0.0; nseg];
    for (r, &s) in seg.iter().enumerate() {
        let e = (x.data[r] - maxes[s]).exp();
        out.data[r] = e;
        sums[s] += e;
    }
    for (r, &s) in seg.iter().enumerate() {
        out.data[r] /= sums[s];
    }
    out
}

fn group_norm_forward(x: &Tensor, groups: usize, eps: f64) -> Tensor {
    let gsize = x.cols / groups;
    let mut out = x.clone();
    for r in 0..x.rows {
        for g in 0..groups {
            let base = r * x.cols + g * gsize;
            let slice = &x.data[base..base + gsize];
            let mean = slice.iter().sum::<f64>() / gsize as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..gsize {
                out.data[base + c] = (x.data[base + c] - mean) * inv;
            }
        }
    }
    out
}

fn group_norm_backward(x: &Tensor, y: &Tensor, g: &Tensor, groups: usize, eps: f64) -> Tensor {
    let gsize = x.cols / groups;
    let mut gx = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        for gi in 0..groups {
            let base = r * x.cols + gi * gsize;
            let xs = &x.data[base..base + gsize];
            let mean = xs.iter().sum::<f64>() / gsize as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let gs = &g.data[base..base + gsize];
            let ys = &y.data[base..base + gsize];
            let mean_g = gs.iter().sum::<f64>() / gsize as f64;
            let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / gsize as f64;
            for c in 0..gsize {
                gx.data[base + c] = inv * (gs[c] - mean_g - ys[c] * mean_gy);
            }
        }
    }
    gx
}

fn matmul_nn(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ`, shapes `a (N×M)`, `b (K×M)`, `out (N×K)`.
fn matmul_nt(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, m, k) = (a.rows, a.cols, b.rows);
    debug_assert_eq!(b.cols, m);
    for i in 0..n {
        let arow = &a.data[i * m..(i + 1) * m];
        let orow = &mut out.data[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b.data[kk * m..(kk + 1) * m];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            orow[kk] += acc;
        }
    }
}

/// `out += aᵀ · b`, shapes `a (N×K)`, `b (N×M)`, `out (K×M)`.
fn matmul_tn(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
