use super::kernels::{self, AttnDims, ConvGeom, MatRef};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    /// Position of the node in creation order.
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Gather { a: Var, index: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { a: Var, rstd: Vec<f64> },
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<f64> },
    L2Normalize { a: Var, denom: Vec<f64> },
    Bilinear { a: Var, batch: usize, src: (usize, usize, usize), dst: (usize, usize) },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBcast(..) => "add_bcast",
            Op::MulBcast(..) => "mul_bcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Attention { .. } => "attention",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Bilinear { .. } => "bilinear",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddBcast(a, b)
            | Op::MulBcast(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Narrow { a, .. }
            | Op::Gather { a, .. }
            | Op::GatherRows { a, .. }
            | Op::LayerNorm { a, .. }
            | Op::L2Normalize { a, .. }
            | Op::Bilinear { a, .. } => vec![*a],
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Expression graph recorded eagerly as operations are applied.
///
/// Nodes are only ever appended, so creation order is a topological order
/// and the graph is acyclic by construction.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    keep_context: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; `None` when `v` does not require
    /// gradients or is not reachable from the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes holding a gradient.
    pub fn populated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let total: usize = shape.iter().product();
    (total / cols.max(1), cols)
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    /// 64-bit graph that records backward context.
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            keep_context: true,
        }
    }

    /// Graph for forward-only evaluation: large backward buffers (attention
    /// probabilities) are not retained, and `backward` is unavailable.
    pub fn inference(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            keep_context: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf", node: id });
        }
        let value = t.rounded(self.precision);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(id))
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Constant copy of `a`, cutting the gradient path.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).clone();
        self.input(t)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, mut data: Vec<f64>) -> Result<Var> {
        let id = self.nodes.len();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.precision.round_slice(&mut data);
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `[..., k] · [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = split_last(&sa);
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            self.precision,
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), k, n),
            &mut out,
            n,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Op::MatMul(a, b), shape, out)
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("need rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        self.push(Op::Transpose(a), vec![n, m], out)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                op,
                format!("{sb:?} is not a trailing sub-shape of {sa:?}"),
            ));
        }
        Ok(self.value(b).numel())
    }

    /// `a + b` where `b`'s shape is a trailing sub-shape of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.check_suffix("add_bcast", a, b)?;
        let bv = self.value(b).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::AddBcast(a, b), shape, out)
    }

    /// `a * b` where `b`'s shape is a trailing sub-shape of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.check_suffix("mul_bcast", a, b)?;
        let bv = self.value(b).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::MulBcast(a, b), shape, out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        let shape = t.shape().to_vec();
        self.push(Op::Scale(a, c), shape, t.into_data())
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        let shape = t.shape().to_vec();
        self.push(Op::AddScalar(a), shape, t.into_data())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).data().to_vec();
        self.push(Op::Reshape(a), shape.to_vec(), data)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {s0:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_layout(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            out,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {s:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_layout(&s, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Op::Narrow { a, axis, start }, shape, out)
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of {n}")));
        }
        let x = self.value(a).data();
        let out = index.iter().map(|&i| x[i]).collect();
        self.push(Op::Gather { a, index }, shape.to_vec(), out)
    }

    /// Embedding lookup: rows of `a` viewed as `[rows, cols]`.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = split_last(self.shape(a));
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {r}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let shape = vec![rows.len(), c];
        self.push(Op::GatherRows { a, rows }, shape, out)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Op::Softmax(a), shape, out)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Op::LogSoftmax(a), shape, out)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        let mut rstds = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let shape = t.shape().to_vec();
        self.push(Op::LayerNorm { a, rstd: rstds }, shape, out)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(kernels::gelu);
        let shape = t.shape().to_vec();
        self.push(Op::Gelu(a), shape, t.into_data())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        let shape = t.shape().to_vec();
        self.push(Op::Exp(a), shape, t.into_data())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        let shape = t.shape().to_vec();
        self.push(Op::Log(a), shape, t.into_data())
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::sqrt);
        let shape = t.shape().to_vec();
        self.push(Op::Sqrt(a), shape, t.into_data())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), vec![], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum() / t.numel().max(1) as f64;
        self.push(Op::Mean(a), vec![], vec![m])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let out = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        self.push(Op::SumLast(a), shape, out)
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
            return Err(Error::shape(
                op,
                format!("input {sx:?} (NHWC) with kernel {sw:?} (kh,kw,cin,cout), stride {stride}"),
            ));
        }
        let (b, h, wd, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, co) = (sw[0], sw[1], sw[3]);
        let (oh, ow) = if transposed {
            let oh = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
            let ow = ((wd - 1) * stride + kw) as isize - 2 * pad as isize;
            (oh, ow)
        } else {
            let oh = (h + 2 * pad) as isize - kh as isize;
            let ow = (wd + 2 * pad) as isize - kw as isize;
            (oh / stride as isize + 1, ow / stride as isize + 1)
        };
        if oh <= 0 || ow <= 0 || (!transposed && (h + 2 * pad < kh || wd + 2 * pad < kw)) {
            return Err(Error::shape(op, format!("empty output for input {sx:?}, kernel {sw:?}")));
        }
        Ok(ConvGeom {
            batch: b,
            in_h: h,
            in_w: wd,
            in_c: ci,
            out_h: oh as usize,
            out_w: ow as usize,
            out_c: co,
            kh,
            kw,
            stride,
            pad,
        })
    }

    /// 2-D convolution, `x: [B,H,W,Cin]`, `w: [kh,kw,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, w, stride, pad, false)?;
        let out = kernels::conv2d_forward(
            self.precision,
            geom,
            self.value(x).data(),
            self.value(w).data(),
        );
        let shape = vec![geom.batch, geom.out_h, geom.out_w, geom.out_c];
        self.push(Op::Conv2d { x, w, geom }, shape, out)
    }

    /// 2-D transposed convolution, `x: [B,H,W,Cin]`, `w: [kh,kw,Cin,Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom("conv_transpose2d", x, w, stride, pad, true)?;
        let out = kernels::conv_transpose2d_forward(
            self.precision,
            geom,
            self.value(x).data(),
            self.value(w).data(),
        );
        let shape = vec![geom.batch, geom.out_h, geom.out_w, geom.out_c];
        self.push(Op::ConvTranspose2d { x, w, geom }, shape, out)
    }

    /// Multi-head scaled dot-product attention over `[B, T, heads·head_dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape(
                "attention",
                format!("q {s:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape(
                "attention",
                format!("width {} not divisible by {heads} heads", s[2]),
            ));
        }
        let dims = AttnDims {
            batch: s[0],
            tokens: s[1],
            heads,
            head_dim: s[2] / heads,
        };
        let (out, probs) = kernels::attention_forward(
            self.precision,
            dims,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.keep_context,
        );
        self.push(Op::Attention { q, k, v, dims, probs }, s, out)
    }

    /// Scales rows (last axis) to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        let mut denoms = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(c) {
            let d = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in row.iter_mut() {
                *x /= d;
            }
            denoms.push(d);
        }
        let shape = t.shape().to_vec();
        self.push(Op::L2Normalize { a, denom: denoms }, shape, out)
    }

    /// Bilinear resize of `[B,H,W,C]` to `[B,oh,ow,C]`.
    pub fn bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || oh == 0 || ow == 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape("bilinear", format!("{s:?} -> ({oh}, {ow})")));
        }
        let src = (s[1], s[2], s[3]);
        let out = kernels::bilinear_forward(self.value(a).data(), s[0], src, (oh, ow));
        self.push(
            Op::Bilinear {
                a,
                batch: s[0],
                src,
                dst: (oh, ow),
            },
            vec![s[0], oh, ow, s[3]],
            out,
        )
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rshape = self.shape(root);
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(rshape.to_vec()));
        }
        if !self.keep_context {
            return Err(Error::invalid("backward on an inference graph"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let prec = self.precision;
        let val = |v: Var| self.nodes[v.0].value.data();
        // Gradient buffer of an input, created on first use; None for constants.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n.max(1);
                let gm = MatRef::dense(g, m, n);
                if let Some(da) = acc!(*a) {
                    kernels::gemm(prec, gm, MatRef::dense(val(*b), k, n).t(), da, k, true);
                }
                if let Some(db) = acc!(*b) {
                    kernels::gemm(prec, MatRef::dense(val(*a), m, k).t(), gm, db, n, true);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                if let Some(da) = acc!(*a) {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = acc!(*a) {
                    for ((d, x), bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += x * bv;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, x), av) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += x * av;
                    }
                }
            }
            Op::Div(a, b) => {
                if let Some(da) = acc!(*a) {
                    for ((d, x), bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += x / bv;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for (j, d) in db.iter_mut().enumerate() {
                        let bv = val(*b)[j];
                        *d -= g[j] * val(*a)[j] / (bv * bv);
                    }
                }
            }
            Op::AddBcast(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = acc!(*b) {
                    let nb = db.len();
                    for chunk in g.chunks(nb) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::MulBcast(a, b) => {
                let bv = val(*b);
                let nb = bv.len();
                if let Some(da) = acc!(*a) {
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += g[j] * bv[j % nb];
                    }
                }
                if let Some(db) = acc!(*b) {
                    let av = val(*a);
                    for (j, (x, ax)) in g.iter().zip(av).enumerate() {
                        db[j % nb] += x * ax;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Concat { inputs, axis } => {
                let s0 = self.shape(inputs[0]);
                let (outer, _, inner) = axis_layout(s0, *axis);
                let total: usize = inputs.iter().map(|v| self.shape(*v)[*axis]).sum();
                let mut off = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if let Some(dv) = acc!(v) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + off..o * total * inner + off + len];
                            dv[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                    off += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let s = self.shape(*a);
                let (outer, n, inner) = axis_layout(s, *axis);
                let len = node.value.shape()[*axis];
                if let Some(da) = acc!(*a) {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        da[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(da) = acc!(*a) {
                    for (&i, x) in index.iter().zip(g) {
                        da[i] += x;
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                let c = node.value.cols();
                if let Some(da) = acc!(*a) {
                    for (r, &i) in rows.iter().enumerate() {
                        da[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                if let Some(da) = acc!(*a) {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, x), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (x - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                if let Some(da) = acc!(*a) {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, x), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += x - yv.exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let c = node.value.cols();
                if let Some(da) = acc!(*a) {
                    for (r, ((drow, grow), yrow)) in
                        da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate()
                    {
                        let mg = grow.iter().sum::<f64>() / c as f64;
                        let mgy = grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / c as f64;
                        for ((d, x), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += rstd[r] * (x - mg - yv * mgy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(da) = acc!(*a) {
                    for ((d, x), xv) in da.iter_mut().zip(g).zip(val(*a)) {
                        *d += x * kernels::gelu_grad(*xv);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = acc!(*a) {
                    for ((d, x), yv) in da.iter_mut().zip(g).zip(y) {
                        *d += x * yv;
                    }
                }
            }
            Op::Log(a) => {
                if let Some(da) = acc!(*a) {
                    for ((d, x), xv) in da.iter_mut().zip(g).zip(val(*a)) {
                        *d += x / xv;
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(da) = acc!(*a) {
                    for ((d, x), yv) in da.iter_mut().zip(g).zip(y) {
                        if *yv > 0.0 {
                            *d += 0.5 * x / yv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(da) = acc!(*a) {
                    let n = da.len() as f64;
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SumLast(a) => {
                let c = self.value(*a).cols();
                if let Some(da) = acc!(*a) {
                    for (drow, x) in da.chunks_mut(c).zip(g) {
                        drow.iter_mut().for_each(|d| *d += x);
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut dw = acc!(*w).map(|s| s.to_vec());
                let dx = acc!(*x);
                kernels::conv2d_backward(prec, *geom, xv, wv, g, dx, dw.as_deref_mut());
                if let (Some(buf), Some(dst)) = (dw, acc!(*w)) {
                    dst.copy_from_slice(&buf);
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut dw = acc!(*w).map(|s| s.to_vec());
                let dx = acc!(*x);
                kernels::conv_transpose2d_backward(prec, *geom, xv, wv, g, dx, dw.as_deref_mut());
                if let (Some(buf), Some(dst)) = (dw, acc!(*w)) {
                    dst.copy_from_slice(&buf);
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                let n = g.len();
                let mut dq = vec![0.0; n];
                let mut dk = vec![0.0; n];
                let mut dv = vec![0.0; n];
                kernels::attention_backward(
                    prec, *dims, val(*q), val(*k), val(*v), probs, g, &mut dq, &mut dk, &mut dv,
                );
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = acc!(var) {
                        d.iter_mut().zip(&buf).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::L2Normalize { a, denom } => {
                let c = node.value.cols();
                if let Some(da) = acc!(*a) {
                    for (r, ((drow, grow), yrow)) in
                        da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, x), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (x - yv * dot) / denom[r];
                        }
                    }
                }
            }
            Op::Bilinear { a, batch, src, dst } => {
                if let Some(da) = acc!(*a) {
                    kernels::bilinear_backward(g, *batch, *src, *dst, da);
                }
            }
        }
    }
}
