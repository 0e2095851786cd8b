//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op evaluates eagerly,
//! appends a node holding its output, and returns a [`Var`] handle. Nodes are
//! appended in evaluation order, so the tape is topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Values are matrices in row-major order: the last dim is the column count
//! and every leading dim folds into rows. Vectors are single rows.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{kernels, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Log {
        x: Var,
        floor: T,
    },
    Pow {
        x: Var,
        exponent: T,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Dropout { .. } => "dropout",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Reshape(_) => "reshape",
            Op::Log { .. } => "log",
            Op::Pow { .. } => "pow",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather { .. } => "gather",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    dims: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn rows_cols(dims: &[usize]) -> (usize, usize) {
    let cols = *dims.last().unwrap_or(&1);
    (dims.iter().product::<usize>() / cols.max(1), cols)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, dims: Vec<usize>, data: Vec<T>) -> Result<Var> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op.tag()));
        }
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            dims,
            data,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::Transpose(x)
            | Op::Affine(x, _)
            | Op::SoftmaxRows(x)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Dropout { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Log { x, .. }
            | Op::Pow { x, .. }
            | Op::Gather { x, .. } => vec![*x],
        }
    }

    /// Constant input. With `requires_grad` its gradient is kept and readable
    /// through [`Graph::grad`] after the backward sweep.
    pub fn input(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push(Op::Input, tensor.dims().to_vec(), tensor.data().to_vec())?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, tensor: &Tensor<T>) -> Result<Var> {
        self.input(tensor, false)
    }

    /// Brings a parameter into the graph; its gradient flows back into the
    /// store on [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        self.push(Op::Param(id), t.dims().to_vec(), t.data().to_vec())
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn rows_cols(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].dims)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.dims.clone(), n.data.clone()).expect("node dims are consistent")
    }

    /// Gradient of the last backward sweep w.r.t. `v`, if it reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::shape("matmul", alloc::format!("{da:?} . {db:?}")));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), m, k, n, &mut out);
        self.push(Op::MatMul(a, b), vec![m, n], out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        let src = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(x), vec![c, r], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("add", alloc::format!("{:?} + {:?}", self.dims(a), self.dims(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(Op::Add(a, b), self.dims(a).to_vec(), out)
    }

    /// Adds row vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row", alloc::format!("{:?} + {:?}", self.dims(x), self.dims(bias))));
        }
        let b = self.value(bias);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        self.push(Op::AddRow(x, bias), self.dims(x).to_vec(), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("mul", alloc::format!("{:?} * {:?}", self.dims(a), self.dims(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push(Op::Mul(a, b), self.dims(a).to_vec(), out)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        self.push(Op::Affine(x, scale), self.dims(x).to_vec(), out)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(x), self.dims(x).to_vec(), out)
    }

    /// Per-row normalisation to zero mean and unit (biased) variance, then
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", alloc::format!("row width {c}")));
        }
        let n = T::of_usize(c);
        let src = self.value(x);
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * s;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = xhat.iter().enumerate().map(|(i, &h)| g[i % c] * h + b[i % c]).collect();
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            self.dims(x).to_vec(),
            out,
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(Op::Gelu(x), self.dims(x).to_vec(), out)
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: RngCore + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(alloc::format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(Op::Dropout { x, mask }, self.dims(x).to_vec(), out)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", alloc::format!("{start}..{} of {c}", start + len)));
        }
        let src = self.value(x);
        let out = (0..r).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push(Op::SliceCols { x, start }, vec![r, len], out)
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("concat_rows", "no operands"));
        };
        let c = self.rows_cols(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, cx) = self.rows_cols(x);
            if cx != c {
                return Err(Error::shape("concat_rows", alloc::format!("widths {c} and {cx}")));
            }
            rows += r;
            out.extend_from_slice(self.value(x));
        }
        self.push(Op::ConcatRows(xs.to_vec()), vec![rows, c], out)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("concat_cols", "no operands"));
        };
        let r = self.rows_cols(first).0;
        let widths: Vec<usize> = xs.iter().map(|&x| self.rows_cols(x).1).collect();
        if xs.iter().any(|&x| self.rows_cols(x).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        self.push(Op::ConcatCols(xs.to_vec()), vec![r, total], out)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        if dims.iter().product::<usize>() != self.value(x).len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", alloc::format!("{:?} -> {dims:?}", self.dims(x))));
        }
        let out = self.value(x).to_vec();
        self.push(Op::Reshape(x), dims.to_vec(), out)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(floor).ln()).collect();
        self.push(Op::Log { x, floor }, self.dims(x).to_vec(), out)
    }

    /// Elementwise `x^exponent` for `x ≥ 0`.
    pub fn powf(&mut self, x: Var, exponent: T) -> Result<Var> {
        if self.value(x).iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("powf needs non-negative input"));
        }
        let out = self.value(x).iter().map(|&v| v.powf(exponent)).collect();
        self.push(Op::Pow { x, exponent }, self.dims(x).to_vec(), out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(Op::Sum(x), vec![1], vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of_usize(self.value(x).len());
        let s = self.value(x).iter().copied().sum::<T>() / n;
        self.push(Op::Mean(x), vec![1], vec![s])
    }

    /// Picks `x[i, index[i]]` from each row, giving a column.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if index.len() != r {
            return Err(Error::shape("gather_rows", alloc::format!("{} indices for {r} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&k| k >= c) {
            return Err(Error::InvalidLabel(bad));
        }
        let src = self.value(x);
        let out = index.iter().enumerate().map(|(i, &k)| src[i * c + k]).collect();
        self.push(Op::Gather { x, index: index.to_vec() }, vec![r, 1], out)
    }

    /// Reverse sweep from scalar `loss`. Parameter gradients are added to the
    /// store's grad slots (the caller zeroes them between steps).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_sweep(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Reverse sweep without a parameter store; gradients stay readable
    /// through [`Graph::grad`].
    pub fn backward_sweep(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.dims(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Input | Op::Param(_)) || !node.requires_grad {
                continue;
            }
            if grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.data.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = node.dims[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| {
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let b_row = &bv[p * n..(p + 1) * n];
                            da[r * k + p] += g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            if a_rp == T::zero() {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *d += a_rp * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.rows_cols(*x);
                acc(*x, &mut |dx| {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddRow(x, bias) => {
                let c = node.dims[node.dims.len() - 1];
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for (k, &gv) in g.iter().enumerate() {
                        d[k % c] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Affine(x, s) => acc(*x, &mut |d| {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += *s * gv;
                }
            }),
            Op::SoftmaxRows(x) => {
                let c = node.dims[node.dims.len() - 1];
                let y = &node.data;
                acc(*x, &mut |d| {
                    for (row, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            d[row * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.dims[node.dims.len() - 1];
                let n = T::of_usize(c);
                let gv = self.value(*gain);
                acc(*x, &mut |d| {
                    for (row, s) in inv_std.iter().enumerate() {
                        let base = row * c;
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            let dh = g[base + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[base + j];
                        }
                        for j in 0..c {
                            let dh = g[base + j] * gv[j];
                            d[base + j] += *s / n * (n * dh - sum_dh - xhat[base + j] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (k, (&gk, &hk)) in g.iter().zip(xhat).enumerate() {
                        d[k % c] += gk * hk;
                    }
                });
                acc(*bias, &mut |d| {
                    for (k, &gk) in g.iter().enumerate() {
                        d[k % c] += gk;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * kernels::gelu_grad(xv[k]);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * mask[k];
                }
            }),
            Op::SliceCols { x, start } => {
                let c = self.rows_cols(*x).1;
                let len = node.dims[1];
                acc(*x, &mut |d| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut d[r * c + start..r * c + start + len], gr);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    acc(x, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.dims[1];
                let mut col = 0;
                for &x in xs {
                    let (r, w) = self.rows_cols(x);
                    acc(x, &mut |d| {
                        for i in 0..r {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Log { x, floor } => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > *floor {
                            d[k] += g[k] / xv[k];
                        }
                    }
                });
            }
            Op::Pow { x, exponent } => {
                let xv = self.value(*x);
                let e = *exponent;
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        // one-sided derivative at 0; zero where it diverges
                        let slope = if e == T::zero() {
                            T::zero()
                        } else if xv[k] == T::zero() {
                            if e == T::one() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        } else {
                            e * xv[k].powf(e - T::one())
                        };
                        d[k] += g[k] * slope;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = T::of_usize(self.value(*x).len());
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Gather { x, index } => {
                let c = self.rows_cols(*x).1;
                acc(*x, &mut |d| {
                    for (r, &k) in index.iter().enumerate() {
                        d[r * c + k] += g[r];
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
