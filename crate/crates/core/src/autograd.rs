//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op records its output value and enough state to push a gradient
//! back to its inputs. Nodes whose inputs never require a gradient are
//! skipped on the backward sweep, so frozen sub-graphs cost nothing there.
//!
//! Matrices are 2-D `[rows, cols]`; bias-like operands are 1-D of length
//! `cols`; reductions produce `[1]` scalars.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major boolean mask; `true` marks an admissible (query, key) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    // masked entries carry zero weight, so the backward pass needs no mask
    Softmax(Var),
    LogSoftmax(Var, Option<Arc<Mask>>),
    LayerNorm { x: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    GatherRows(Var, Arc<Vec<usize>>),
    Gather(Var, Arc<Vec<Option<usize>>>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a, _)
            | Op::LayerNorm { x: a, .. }
            | Op::NormalizeRows { x: a, .. }
            | Op::GatherRows(a, _)
            | Op::Gather(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
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

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|i| nodes[i.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn dims2(t: &Tensor) -> (usize, usize) {
        (t.rows(), t.cols())
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = {
            let av = self.value(a);
            let data = av.data().iter().map(|&x| f(x)).collect();
            Tensor::new(av.shape(), data).expect("shape preserved")
        };
        self.push(value, op)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape(), data).expect("shape preserved")
        };
        self.push(value, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            let (m, k) = Self::dims2(&av);
            let (k2, n) = Self::dims2(&bv);
            assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
            Tensor::new(&[m, n], matmul(av.data(), bv.data(), m, k, n)).unwrap()
        };
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            let (m, k) = Self::dims2(&av);
            let (n, k2) = Self::dims2(&bv);
            assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
            Tensor::new(&[m, n], matmul_bt(av.data(), bv.data(), m, k, n)).unwrap()
        };
        self.push(value, Op::MatMulBt(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcasts a length-`cols` vector over every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (av, rv) = (self.value(a), self.value(row));
            let c = av.cols();
            assert_eq!(rv.len(), c, "add_row width mismatch");
            let mut data = av.data().to_vec();
            for chunk in data.chunks_mut(c) {
                for (x, r) in chunk.iter_mut().zip(rv.data()) {
                    *x += r;
                }
            }
            Tensor::new(av.shape(), data).unwrap()
        };
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let (av, rv) = (self.value(a), self.value(row));
            let c = av.cols();
            assert_eq!(rv.len(), c, "mul_row width mismatch");
            let mut data = av.data().to_vec();
            for chunk in data.chunks_mut(c) {
                for (x, r) in chunk.iter_mut().zip(rv.data()) {
                    *x *= r;
                }
            }
            Tensor::new(av.shape(), data).unwrap()
        };
        self.push(value, Op::MulRow(a, row))
    }

    /// `a * scale + shift`, elementwise.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, |x| x * scale + shift, Op::Affine(a, scale))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax. Masked-out entries receive exactly zero weight.
    ///
    /// Panics if a row has no admissible entry.
    pub fn softmax(&self, a: Var, mask: Option<Arc<Mask>>) -> Var {
        let value = {
            let av = self.value(a);
            let (r, c) = Self::dims2(&av);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = av.row(i);
                let allowed = mask.as_ref().map(|m| m.row(i));
                let ok = |j: usize| allowed.is_none_or(|m| m[j]);
                let max = (0..c)
                    .filter(|&j| ok(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(max > f64::NEG_INFINITY, "softmax row {i} fully masked");
                let mut sum = 0.0;
                for j in (0..c).filter(|&j| ok(j)) {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
                for v in &mut out[i * c..(i + 1) * c] {
                    *v /= sum;
                }
            }
            Tensor::new(av.shape(), out).unwrap()
        };
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise log-softmax; masked-out entries are `-inf` and carry no gradient.
    pub fn log_softmax(&self, a: Var, mask: Option<Arc<Mask>>) -> Var {
        let value = {
            let av = self.value(a);
            let (r, c) = Self::dims2(&av);
            let mut out = vec![f64::NEG_INFINITY; r * c];
            for i in 0..r {
                let row = av.row(i);
                let allowed = mask.as_ref().map(|m| m.row(i));
                let ok = |j: usize| allowed.is_none_or(|m| m[j]);
                let max = (0..c)
                    .filter(|&j| ok(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(max > f64::NEG_INFINITY, "log_softmax row {i} fully masked");
                let sum: f64 = (0..c).filter(|&j| ok(j)).map(|j| (row[j] - max).exp()).sum();
                let lse = max + sum.ln();
                for j in (0..c).filter(|&j| ok(j)) {
                    out[i * c + j] = row[j] - lse;
                }
            }
            Tensor::new(av.shape(), out).unwrap()
        };
        self.push(value, Op::LogSoftmax(a, mask))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let (value, xhat, rstd) = {
            let av = self.value(a);
            let (r, c) = Self::dims2(&av);
            let mut xhat = vec![0.0; r * c];
            let mut rstd = vec![0.0; r];
            for i in 0..r {
                let row = av.row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[i] = s;
                for j in 0..c {
                    xhat[i * c + j] = (row[j] - mean) * s;
                }
            }
            (Tensor::new(av.shape(), xhat.clone()).unwrap(), xhat, rstd)
        };
        self.push(value, Op::LayerNorm { x: a, xhat, rstd })
    }

    /// Scales every row to unit L2 norm. Rows must be nonzero.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let (value, norms) = {
            let av = self.value(a);
            let (r, c) = Self::dims2(&av);
            let mut out = av.data().to_vec();
            let mut norms = vec![0.0; r];
            for i in 0..r {
                let n = crate::tensor::l2_norm(av.row(i));
                norms[i] = n;
                for v in &mut out[i * c..(i + 1) * c] {
                    *v /= n;
                }
            }
            (Tensor::new(av.shape(), out).unwrap(), norms)
        };
        self.push(value, Op::NormalizeRows { x: a, norms })
    }

    /// `out[r] = a[idx[r]]` over rows.
    pub fn gather_rows(&self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let value = {
            let av = self.value(a);
            let c = av.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                out.extend_from_slice(av.row(i));
            }
            Tensor::new(&[idx.len(), c], out).unwrap()
        };
        self.push(value, Op::GatherRows(a, idx))
    }

    /// Flat gather: `out[i] = a.flat[idx[i]]`, or zero for `None`.
    pub fn gather(&self, a: Var, idx: Arc<Vec<Option<usize>>>, shape: &[usize]) -> Var {
        let value = {
            let av = self.value(a);
            let d = av.data();
            let out = idx.iter().map(|i| i.map_or(0.0, |i| d[i])).collect();
            Tensor::new(shape, out).expect("gather shape must match index count")
        };
        self.push(value, Op::Gather(a, idx))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let c = nodes[parts[0].0].value.cols();
            let mut rows = 0;
            let mut out = Vec::new();
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.cols(), c, "concat_rows width mismatch");
                rows += v.rows();
                out.extend_from_slice(v.data());
            }
            Tensor::new(&[rows, c], out).unwrap()
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let av = self.value(a);
            let c = av.cols();
            assert!(start + len <= av.rows(), "slice_rows out of range");
            Tensor::new(&[len, c], av.data()[start * c..(start + len) * c].to_vec()).unwrap()
        };
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Var {
        let value = {
            let av = self.value(a);
            let (r, c) = Self::dims2(&av);
            assert!(start + width <= c, "slice_cols out of range");
            let mut out = Vec::with_capacity(r * width);
            for i in 0..r {
                out.extend_from_slice(&av.row(i)[start..start + width]);
            }
            Tensor::new(&[r, width], out).unwrap()
        };
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let r = nodes[parts[0].0].value.rows();
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.0].value.cols()).collect();
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    let v = &nodes[p.0].value;
                    assert_eq!(v.rows(), r, "concat_cols height mismatch");
                    out.extend_from_slice(v.row(i));
                }
            }
            Tensor::new(&[r, total], out).unwrap()
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = {
            let av = self.value(a);
            av.data().iter().sum::<f64>() / av.len() as f64
        };
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let value = {
            let av = self.value(a);
            let (r, c) = Self::dims2(&av);
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(av.row(i)) {
                    *o += x;
                }
            }
            for o in &mut out {
                *o /= r as f64;
            }
            Tensor::new(&[1, c], out).unwrap()
        };
        self.push(value, Op::MeanRows(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape size");
        self.push(value, Op::Reshape(a))
    }

    /// Backward sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Gradients {
        let shape = self.shape(loss);
        self.backward_from(&[(loss, Tensor::full(&shape, 1.0))])
    }

    /// Backward sweep from arbitrary seed gradients on several outputs.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(nodes[v.0].value.shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[i];
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let val = |v: &Var| &nodes[v.0].value;
    let like = |v: &Var, data: Vec<f64>| Tensor::new(nodes[v.0].value.shape(), data).unwrap();
    let gd = g.data();

    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            if needs(a) {
                accumulate(grads, *a, like(a, matmul_bt(gd, bv.data(), m, n, k)));
            }
            if needs(b) {
                accumulate(grads, *b, like(b, matmul_at(av.data(), gd, m, k, n)));
            }
        }
        Op::MatMulBt(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = (av.rows(), av.cols());
            let n = bv.rows();
            if needs(a) {
                accumulate(grads, *a, like(a, matmul(gd, bv.data(), m, n, k)));
            }
            if needs(b) {
                accumulate(grads, *b, like(b, matmul_at(gd, av.data(), m, n, k)));
            }
        }
        Op::Add(a, b) => {
            if needs(a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(b) {
                accumulate(grads, *b, like(b, gd.iter().map(|x| -x).collect()));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if needs(a) {
                let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, like(a, d));
            }
            if needs(b) {
                let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *b, like(b, d));
            }
        }
        Op::AddRow(a, r) => {
            if needs(a) {
                accumulate(grads, *a, like(a, gd.to_vec()));
            }
            if needs(r) {
                let c = val(r).len();
                let mut d = vec![0.0; c];
                for chunk in gd.chunks(c) {
                    for (o, x) in d.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                accumulate(grads, *r, like(r, d));
            }
        }
        Op::MulRow(a, r) => {
            let (av, rv) = (val(a), val(r));
            let c = rv.len();
            if needs(a) {
                let d = gd.iter().enumerate().map(|(k, g)| g * rv.data()[k % c]).collect();
                accumulate(grads, *a, like(a, d));
            }
            if needs(r) {
                let mut d = vec![0.0; c];
                for (k, (g, x)) in gd.iter().zip(av.data()).enumerate() {
                    d[k % c] += g * x;
                }
                accumulate(grads, *r, like(r, d));
            }
        }
        Op::Affine(a, s) => {
            accumulate(grads, *a, like(a, gd.iter().map(|g| g * s).collect()));
        }
        Op::Gelu(a) => {
            let d = gd.iter().zip(val(a).data()).map(|(g, &x)| g * gelu_grad(x)).collect();
            accumulate(grads, *a, like(a, d));
        }
        Op::Sigmoid(a) => {
            let d = gd
                .iter()
                .zip(node.value.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            accumulate(grads, *a, like(a, d));
        }
        Op::Log(a) => {
            let d = gd.iter().zip(val(a).data()).map(|(g, x)| g / x).collect();
            accumulate(grads, *a, like(a, d));
        }
        Op::Clamp(a, lo, hi) => {
            let d = gd
                .iter()
                .zip(val(a).data())
                .map(|(g, x)| if x >= lo && x <= hi { *g } else { 0.0 })
                .collect();
            accumulate(grads, *a, like(a, d));
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut d = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = &gd[r * c..(r + 1) * c];
                let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    d[r * c + j] = yr[j] * (gr[j] - s);
                }
            }
            accumulate(grads, *a, like(a, d));
        }
        Op::LogSoftmax(a, mask) => {
            let y = &node.value;
            let c = y.cols();
            let mut d = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let ok = |j: usize| mask.as_ref().is_none_or(|m| m.allows(r, j));
                let gr = &gd[r * c..(r + 1) * c];
                let s: f64 = (0..c).filter(|&j| ok(j)).map(|j| gr[j]).sum();
                for j in (0..c).filter(|&j| ok(j)) {
                    d[r * c + j] = gr[j] - y.row(r)[j].exp() * s;
                }
            }
            accumulate(grads, *a, like(a, d));
        }
        Op::LayerNorm { x, xhat, rstd } => {
            let c = node.value.cols();
            let mut d = vec![0.0; xhat.len()];
            for (r, &s) in rstd.iter().enumerate() {
                let gr = &gd[r * c..(r + 1) * c];
                let xr = &xhat[r * c..(r + 1) * c];
                let mg = gr.iter().sum::<f64>() / c as f64;
                let mgx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / c as f64;
                for j in 0..c {
                    d[r * c + j] = s * (gr[j] - mg - xr[j] * mgx);
                }
            }
            accumulate(grads, *x, like(x, d));
        }
        Op::NormalizeRows { x, norms } => {
            let y = &node.value;
            let c = y.cols();
            let mut d = vec![0.0; y.len()];
            for (r, &n) in norms.iter().enumerate() {
                let yr = y.row(r);
                let gr = &gd[r * c..(r + 1) * c];
                let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    d[r * c + j] = (gr[j] - yr[j] * s) / n;
                }
            }
            accumulate(grads, *x, like(x, d));
        }
        Op::GatherRows(a, idx) => {
            let c = g.cols();
            let mut d = vec![0.0; val(a).len()];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    d[src * c + j] += gd[r * c + j];
                }
            }
            accumulate(grads, *a, like(a, d));
        }
        Op::Gather(a, idx) => {
            let mut d = vec![0.0; val(a).len()];
            for (k, src) in idx.iter().enumerate() {
                if let Some(s) = src {
                    d[*s] += gd[k];
                }
            }
            accumulate(grads, *a, like(a, d));
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(p).len();
                if needs(p) {
                    accumulate(grads, *p, like(p, gd[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::SliceRows(a, start) => {
            let c = g.cols();
            let mut d = vec![0.0; val(a).len()];
            d[start * c..start * c + gd.len()].copy_from_slice(gd);
            accumulate(grads, *a, like(a, d));
        }
        Op::SliceCols(a, start) => {
            let av = val(a);
            let (c, w) = (av.cols(), g.cols());
            let mut d = vec![0.0; av.len()];
            for r in 0..g.rows() {
                d[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
            }
            accumulate(grads, *a, like(a, d));
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let mut offset = 0;
            for p in parts {
                let w = val(p).cols();
                if needs(p) {
                    let mut d = Vec::with_capacity(val(p).len());
                    for r in 0..g.rows() {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, *p, like(p, d));
                }
                offset += w;
            }
        }
        Op::Sum(a) => {
            accumulate(grads, *a, like(a, vec![gd[0]; val(a).len()]));
        }
        Op::Mean(a) => {
            let n = val(a).len();
            accumulate(grads, *a, like(a, vec![gd[0] / n as f64; n]));
        }
        Op::MeanRows(a) => {
            let av = val(a);
            let r = av.rows() as f64;
            let c = av.cols();
            let d = (0..av.len()).map(|k| gd[k % c] / r).collect();
            accumulate(grads, *a, like(a, d));
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, like(a, gd.to_vec()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at `x`, compared to the tape gradient.
    fn check(x: Tensor, f: impl Fn(&Tape, Var) -> Var) {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = f(&tape, xv);
        let loss = tape.sum(out);
        let grads = tape.backward(loss);
        let analytic = grads.get(xv).unwrap().clone();
        let h = 1e-6;
        for k in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[k] += delta;
                let t = Tape::new();
                let v = t.constant(xp);
                let o = f(&t, v);
                let s = t.sum(o);
                let r = t.value(s).item();
                r
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "component {k}: analytic {a} numeric {numeric}");
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_grads() {
        let w = rand_t(&[3, 4], 1);
        check(rand_t(&[2, 3], 2), |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv);
            t.mul(y, y)
        });
        let a = rand_t(&[2, 3], 3);
        check(rand_t(&[4, 3], 4), |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul_bt(av, x);
            t.mul(y, y)
        });
    }

    #[test]
    fn nonlinear_grads() {
        check(rand_t(&[3, 4], 5), |t, x| {
            let y = t.gelu(x);
            let y = t.layer_norm(y, 1e-5);
            let w = t.constant(rand_t(&[3, 4], 6));
            t.mul(y, w)
        });
        check(rand_t(&[3, 4], 7), |t, x| {
            let mask = Arc::new(Mask::from_fn(3, 4, |i, j| j <= i + 1));
            let y = t.softmax(x, Some(mask));
            let w = t.constant(rand_t(&[3, 4], 8));
            t.mul(y, w)
        });
        check(rand_t(&[3, 4], 9), |t, x| {
            let y = t.log_softmax(x, None);
            let w = t.constant(rand_t(&[3, 4], 10));
            t.mul(y, w)
        });
        check(rand_t(&[3, 4], 11), |t, x| {
            let y = t.normalize_rows(x);
            let w = t.constant(rand_t(&[3, 4], 12));
            t.mul(y, w)
        });
        check(rand_t(&[2, 2], 13), |t, x| {
            let s = t.sigmoid(x);
            let c = t.clamp(s, 1e-7, 1.0 - 1e-7);
            t.log(c)
        });
    }

    #[test]
    fn structural_grads() {
        let w = rand_t(&[5, 2], 14);
        check(rand_t(&[3, 4], 15), |t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.gather_rows(x, Arc::new(vec![2, 0, 2]));
            let b = t.slice_cols(b, 0, 2);
            let c = t.concat_rows(&[a, b]);
            let c = t.slice_rows(c, 1, 5);
            let wv = t.constant(w.clone());
            let d = t.mul(c, wv);
            let e = t.concat_cols(&[d, d]);
            let m = t.mean_rows(e);
            let r = t.reshape(m, &[2, 2]);
            t.mul(r, r)
        });
        check(rand_t(&[2, 3], 16), |t, x| {
            let idx = Arc::new(vec![Some(5), None, Some(0), Some(5)]);
            let y = t.gather(x, idx, &[2, 2]);
            let bias = t.constant(rand_t(&[2], 17));
            let z = t.add_row(y, bias);
            let z = t.mul_row(z, bias);
            t.mul(z, z)
        });
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let t = Tape::new();
        let frozen = t.constant(Tensor::scalar(2.0));
        let live = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(frozen, live);
        let g = t.backward(y);
        assert!(g.get(frozen).is_none());
        assert_eq!(g.get(live).unwrap().item(), 2.0);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let t = Tape::new();
        let x = t.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0]).unwrap());
        let y = t.softmax(x, Some(Arc::new(Mask::causal(3).clone_rows(2))));
        let v = t.value(y);
        assert_eq!(v.data()[1], 0.0);
        assert_eq!(v.data()[2], 0.0);
        assert_eq!(v.data()[0], 1.0);
        assert_eq!(v.data()[5], 0.0);
        assert!((v.data()[3] - 0.5).abs() < 1e-15);
    }

    impl Mask {
        fn clone_rows(&self, rows: usize) -> Mask {
            Mask::from_fn(rows, self.cols, |i, j| self.allows(i, j))
        }
    }
}
