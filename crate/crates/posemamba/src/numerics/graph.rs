//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. [`Graph::backward`] walks the tape in reverse insertion
//! order, which is a valid reverse topological order because inputs always
//! precede their consumers.

use std::sync::Arc;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};
use crate::error::{PoseError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written backward rule.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Recip(Var),
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Arc<[usize]>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        left_pad: usize,
    },
    Custom(Box<dyn CustomOp<T>>, Vec<Var>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Overflow-safe `log(1 + e^x)`.
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    let twenty = T::of(20.0);
    if x > twenty {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn dims_err(op: &str, detail: String) -> PoseError {
    PoseError::Dimension(format!("{op}: {detail}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut v = t.clone();
        v.grad = None;
        v.requires_grad = true;
        self.leaf(v)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(PoseError::NonFinite(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dims_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dims_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut c, m, k, n);
        let out = Tensor::new(&[m, n], c)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = Tensor::new(self.shape(a), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let out = Tensor::new(self.shape(a), data)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let out = Tensor::new(self.shape(a), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| dims_err("add_all", "no operands".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    fn trailing(&self, op: &str, x: Var, p: Var) -> Result<usize> {
        let d = self.value(x).last_dim();
        if self.shape(p) != [d] {
            return Err(dims_err(
                op,
                format!("trailing parameter {:?} does not match last axis {d}", self.shape(p)),
            ));
        }
        Ok(d)
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.trailing("add_row_bias", x, b)?;
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv[i % d]).collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::AddRowBias(x, b), &[x, b])
    }

    /// `x ⊙ g` with `g` broadcast along every axis but the last.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let d = self.trailing("mul_row", x, g)?;
        let gv = self.value(g).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * gv[i % d]).collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::MulRow(x, g), &[x, g])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.map_unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.map_unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `x · s` where `s` is a single-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dims_err(
                "scale_by",
                format!("scale must have one element, got {:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s).item();
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sv).collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Recip(x), |v| T::one() / v)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        self.map_unary(x, Op::Gelu(x), |v| {
            half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
        })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Softplus(x), softplus_scalar)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(PoseError::NonFinite("sqrt of a negative value".into()));
        }
        self.map_unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Transpose of a 2D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dims_err("transpose", format!("expected 2D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv[i * c + j];
            }
        }
        let out = Tensor::new(&[c, r], data)?;
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Selects rows of the `[rows, last_dim]` view: `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(dims_err(
                "gather_rows",
                format!("row index {bad} out of range for {rows} rows"),
            ));
        }
        if idx.is_empty() {
            return Err(dims_err("gather_rows", "empty index".into()));
        }
        let src = xv.data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], data)?;
        self.push(out, Op::GatherRows(x, idx), &[x])
    }

    /// Rows `start..end` of the `[rows, last_dim]` view.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.last_dim());
        if start >= end || end > rows {
            return Err(dims_err(
                "slice_rows",
                format!("range {start}..{end} invalid for {rows} rows"),
            ));
        }
        let data = xv.data()[start * d..end * d].to_vec();
        let out = Tensor::new(&[end - start, d], data)?;
        self.push(out, Op::SliceRows(x, start), &[x])
    }

    /// Columns `start..end` of the `[rows, last_dim]` view.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.last_dim());
        if start >= end || end > d {
            return Err(dims_err(
                "slice_cols",
                format!("range {start}..{end} invalid for {d} columns"),
            ));
        }
        let src = xv.data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * d + start..r * d + end]);
        }
        let out = Tensor::new(&[rows, end - start], data)?;
        self.push(out, Op::SliceCols(x, start), &[x])
    }

    /// Concatenates `[rows_i, d]` views along the row axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| dims_err("concat_rows", "no operands".into()))?;
        let d = self.value(first).last_dim();
        let mut data = Vec::new();
        for &x in xs {
            let xv = self.value(x);
            if xv.last_dim() != d {
                return Err(dims_err(
                    "concat_rows",
                    format!("last axis {} differs from {d}", xv.last_dim()),
                ));
            }
            data.extend_from_slice(xv.data());
        }
        let rows = data.len() / d;
        let out = Tensor::new(&[rows, d], data)?;
        self.push(out, Op::ConcatRows(xs.to_vec()), xs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = T::from_usize(xv.len()).expect("length fits");
        let s: T = xv.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Sum over the last axis; output has the leading axes (or `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let data: Vec<T> = xv.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        let shape = if xv.ndim() > 1 {
            xv.shape()[..xv.ndim() - 1].to_vec()
        } else {
            vec![1]
        };
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::SumLast(x), &[x])
    }

    /// Mean over rows of the `[rows, d]` view; output is `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.last_dim());
        let mut acc = vec![T::zero(); d];
        for row in xv.data().chunks(d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = T::from_usize(rows).expect("rows fit");
        for a in &mut acc {
            *a = *a / n;
        }
        let out = Tensor::new(&[d], acc)?;
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// Layer normalization over the last axis followed by the trailing affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.trailing("layer_norm", x, gamma)?;
        self.trailing("layer_norm", x, beta)?;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let dn = T::from_usize(d).expect("d fits");
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = if var + eps > T::zero() {
                T::one() / (var + eps).sqrt()
            } else {
                T::zero()
            };
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Per-channel 1D convolution along the row axis of `x[L×d]` with
    /// `kernel[k×d]`. Causal mode left-pads with `k−1` zeros so that output
    /// row `i` only sees inputs `≤ i`; otherwise padding is split evenly.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, causal: bool) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 2 || sk.len() != 2 || sx[1] != sk[1] {
            return Err(dims_err(
                "depthwise_conv1d",
                format!("input {sx:?} and kernel {sk:?} disagree on channels"),
            ));
        }
        let (l, d, k) = (sx[0], sx[1], sk[0]);
        let left_pad = if causal { k - 1 } else { (k - 1) / 2 };
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![T::zero(); l * d];
        for i in 0..l {
            let orow = &mut out[i * d..(i + 1) * d];
            for m in 0..k {
                // input row i - left_pad + m
                let src = i as isize - left_pad as isize + m as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let src = src as usize;
                let xrow = &xv[src * d..(src + 1) * d];
                let krow = &kv[m * d..(m + 1) * d];
                for c in 0..d {
                    orow[c] += krow[c] * xrow[c];
                }
            }
        }
        let out = Tensor::new(&[l, d], out)?;
        self.push(out, Op::DepthwiseConv { x, kernel, left_pad }, &[x, kernel])
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], output: Tensor<T>) -> Result<Var> {
        self.push(output, Op::Custom(op, inputs.to_vec()), inputs)
    }

    /// Reverse sweep seeded with ones at `root` (so a non-scalar root
    /// differentiates the sum of its elements).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one(); self.value(root).len()]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.value(v).data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(vec![T::zero(); self.value(v).len()]);
            }
            f(slot.as_mut().expect("slot initialised"));
        };
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    acc(*a, &mut |ga| gemm_nt_acc(g, val(*b), ga, m, k, n));
                }
                if wants(*b) {
                    acc(*b, &mut |gb| gemm_tn_acc(val(*a), g, gb, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    let d = gb.len();
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                });
            }
            Op::MulRow(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let d = sv.len();
                acc(*x, &mut |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += g[i] * sv[i % d];
                    }
                });
                acc(*s, &mut |gs| {
                    for (i, &v) in g.iter().enumerate() {
                        gs[i % d] += v * xv[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v * *c;
                }
            }),
            Op::AddScalar(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::ScaleBy(x, s) => {
                let (xv, sv) = (val(*x), val(*s)[0]);
                acc(*x, &mut |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * sv;
                    }
                });
                acc(*s, &mut |gs| {
                    gs[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>();
                });
            }
            Op::Recip(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] -= g[i] * out[i] * out[i];
                }
            }),
            Op::Silu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += g[i] * (s * (T::one() + xv[i] * (T::one() - s)));
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three = T::of(3.0);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let v = xv[i];
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dth = (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        gx[i] += g[i] * (half * (T::one() + th) + half * v * dth);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * out[i] * (T::one() - out[i]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * out[i];
                }
            }),
            Op::Sqrt(x) => acc(*x, &mut |gx| {
                let half = T::of(0.5);
                for i in 0..gx.len() {
                    // subgradient 0 at the origin
                    if out[i] > T::zero() {
                        gx[i] += g[i] * half / out[i];
                    }
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let d = self.value(*x).last_dim();
                acc(*x, &mut |gx| {
                    for (o, &src) in idx.iter().enumerate() {
                        let dst = &mut gx[src * d..(src + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(&g[o * d..(o + 1) * d]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let d = self.value(*x).last_dim();
                acc(*x, &mut |gx| {
                    add_into(&mut gx[start * d..start * d + g.len()], g);
                });
            }
            Op::SliceCols(x, start) => {
                let d = self.value(*x).last_dim();
                let w = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * d + start..r * d + start + w], grow);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(x, &mut |gx| add_into(gx, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |gx| {
                let n = T::from_usize(gx.len()).expect("len fits");
                let v = g[0] / n;
                for o in gx.iter_mut() {
                    *o += v;
                }
            }),
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                acc(*x, &mut |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += g[i / d];
                    }
                });
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let n = T::from_usize(xv.rows()).expect("rows fit");
                acc(*x, &mut |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += g[i % d] / n;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let d = gv.len();
                let dn = T::from_usize(d).expect("d fits");
                acc(*gamma, &mut |gg| {
                    for (i, &v) in g.iter().enumerate() {
                        gg[i % d] += v * xhat[i];
                    }
                });
                acc(*beta, &mut |gb| {
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for j in 0..d {
                            let dy = g[base + j] * gv[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[base + j];
                        }
                        for j in 0..d {
                            let dy = g[base + j] * gv[j];
                            gx[base + j] += rs * (dy - sum_dy / dn - xhat[base + j] * sum_dy_xhat / dn);
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, kernel, left_pad } => {
                let (l, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*kernel)[0];
                let (xv, kv) = (val(*x), val(*kernel));
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for i in 0..l {
                        for m in 0..k {
                            let src = i as isize - *left_pad as isize + m as isize;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            f(i, m, src as usize);
                        }
                    }
                };
                if wants(*x) {
                    acc(*x, &mut |gx| {
                        taps(&mut |i, m, src| {
                            for c in 0..d {
                                gx[src * d + c] += g[i * d + c] * kv[m * d + c];
                            }
                        })
                    });
                }
                if wants(*kernel) {
                    acc(*kernel, &mut |gk| {
                        taps(&mut |i, m, src| {
                            for c in 0..d {
                                gk[m * d + c] += g[i * d + c] * xv[src * d + c];
                            }
                        })
                    });
                }
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let parts = op.backward(&ins, &node.value, g);
                for (&v, part) in inputs.iter().zip(parts) {
                    if let Some(part) = part {
                        acc(v, &mut |gv| add_into(gv, &part));
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRowBias(..) => "add_row_bias",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::ScaleBy(..) => "scale_by",
        Op::Recip(..) => "recip",
        Op::Silu(..) => "silu",
        Op::Gelu(..) => "gelu",
        Op::Softplus(..) => "softplus",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Sqrt(..) => "sqrt",
        Op::Reshape(..) => "reshape",
        Op::Transpose(..) => "transpose",
        Op::GatherRows(..) => "gather_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumLast(..) => "sum_last",
        Op::MeanRows(..) => "mean_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::DepthwiseConv { .. } => "depthwise_conv1d",
        Op::Custom(op, _) => op.name(),
    }
}
