//! Reverse-mode differentiation tape.
//!
//! Every forward operation appends a node holding its value and enough
//! context to run its backward rule. [`Tape::backward`] walks the nodes once
//! in reverse. A tape is built per forward pass and dropped afterwards.

use std::rc::Rc;

use super::conv::{self, ConvGeom, ConvSpec};
use super::kernels::gemm;
use super::resample::{self, AxisMap, Interp};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnOp {
    Relu,
    Gelu,
    Sigmoid,
    Abs,
    Square,
}

/// Precomputed rotation angles for rotary position encoding.
///
/// Features are laid out as `heads` consecutive chunks of `head_dim`, each
/// chunk rotated pairwise `(2p, 2p + 1)` by `angle[token][p]`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    tokens: usize,
    pairs: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    /// 2D rotary table: the first half of each head's pairs encodes the row
    /// coordinate, the second half the column coordinate.
    pub fn new_2d(positions: &[(f32, f32)], head_dim: usize, base: f32) -> Result<Self> {
        if !head_dim.is_multiple_of(4) {
            return Err(Error::dim("rope", format!("head_dim {head_dim} must be a multiple of 4")));
        }
        let pairs = head_dim / 2;
        let per_axis = pairs / 2;
        let freqs: Vec<f64> = (0..per_axis)
            .map(|q| (base as f64).powf(-(q as f64) / per_axis as f64))
            .collect();
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &(r, c) in positions {
            for p in 0..pairs {
                let coord = if p < per_axis { r } else { c } as f64;
                let angle = coord * freqs[p % per_axis];
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(RopeTable {
            tokens: positions.len(),
            pairs,
            cos,
            sin,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.pairs * 2
    }
}

enum Op {
    Leaf,
    Binary(BinOp, Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Unary(UnOp, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    SumTo(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, rstd: Vec<f32> },
    Softmax(Var),
    SoftmaxCe { logits: Var, targets: Rc<Vec<usize>>, probs: Vec<f32> },
    Resample { x: Var, rows: Rc<AxisMap>, cols: Rc<AxisMap> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Gather { table: Var, idx: Rc<Vec<usize>> },
    Rope { x: Var, table: Rc<RopeTable> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Work counters accumulated while recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Multiply-accumulates issued by matmul and convolution.
    pub macs: u64,
    /// Full transformer forward passes (incremented by the model).
    pub transformer_forwards: u64,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: Counters,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn note_transformer_forward(&mut self) {
        self.counters.transformer_forwards += 1;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that collects a gradient when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shapes(op_name(op), sa, sb))?;
        let (xa, xb) = (self.value(a), self.value(b));
        let mut out = vec![0.0f32; out_shape.iter().product()];
        let f: fn(f32, f32) -> f32 = match op {
            BinOp::Add => |x, y| x + y,
            BinOp::Sub => |x, y| x - y,
            BinOp::Mul => |x, y| x * y,
            BinOp::Div => |x, y| x / y,
        };
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(xa.data()).zip(xb.data()) {
                *o = f(x, y);
            }
        } else {
            let (da, db) = (xa.data(), xb.data());
            for_each_bcast(&out_shape, sa, sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary(op, a, b), needs))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|v| v * s);
        let needs = self.ng(a);
        self.push(t, Op::Scale(a, s), needs)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|v| v + s);
        let needs = self.ng(a);
        self.push(t, Op::AddScalar(a), needs)
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Var {
        let f: fn(f32) -> f32 = match op {
            UnOp::Relu => |x| x.max(0.0),
            UnOp::Gelu => gelu,
            UnOp::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            UnOp::Abs => f32::abs,
            UnOp::Square => |x| x * x,
        };
        let t = self.value(a).map(f);
        let needs = self.ng(a);
        self.push(t, Op::Unary(op, a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnOp::Relu, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnOp::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sigmoid, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnOp::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnOp::Square, a)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let needs = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.numel().max(1) as f64;
        let needs = self.ng(a);
        self.push(Tensor::scalar(s as f32), Op::Mean(a), needs)
    }

    /// Sums over broadcast axes so the result has `shape`.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a);
        if broadcast_shape(shape, src).as_deref() != Some(src) {
            return Err(Error::shapes("sum_to", src, shape));
        }
        let out = reduce_to(self.value(a), shape);
        let needs = self.ng(a);
        Ok(self.push(out, Op::SumTo(a), needs))
    }

    /// Mean over the given axes, keeping them as extent-1 axes.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        let mut count = 1usize;
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::dim("mean_axes", format!("axis {ax} out of range for {shape:?}")));
            }
            count *= shape[ax];
            shape[ax] = 1;
        }
        let s = self.sum_to(a, &shape)?;
        Ok(self.scale(s, 1.0 / count as f32))
    }

    /// Σ|x|.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let v = self.abs(a);
        self.sum(v)
    }

    /// Σx².
    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        let v = self.square(a);
        self.sum(v)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        Ok(self.mean(d))
    }

    // ---- linear algebra and layout -------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shapes("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.counters.macs += (m * k * n) as u64;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {s:?}")));
        }
        let t = transpose2d(self.value(a));
        let needs = self.ng(a);
        Ok(self.push(t, Op::Transpose(a), needs))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} invalid for {s:?}")));
        }
        let t = permute_tensor(self.value(a), axes);
        let needs = self.ng(a);
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let needs = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shapes("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), needs))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x: a, axis, start }, needs))
    }

    // ---- normalisation and attention primitives ------------------------

    /// Normalises over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Result<Var> {
        let x = self.value(a);
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        let rows = x.numel() / n.max(1);
        let mut out = vec![0.0f32; x.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = ((v as f64 - mean) * rs) as f32;
            }
            rstd.push(rs as f32);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.ng(a);
        Ok(self.push(t, Op::LayerNorm { x: a, rstd }, needs))
    }

    /// Softmax over the last axis. Where `mask` is given (same numel, `true`
    /// = attend), disallowed entries get probability exactly zero and do not
    /// influence the allowed ones.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let n = *x.shape().last().ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(Error::dim(
                    "softmax",
                    format!("mask has {} entries for input {:?}", m.len(), x.shape()),
                ));
            }
        }
        let mut out = vec![0.0f32; x.numel()];
        for r in 0..x.numel() / n.max(1) {
            let row = &x.data()[r * n..(r + 1) * n];
            let allowed = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let max = (0..n).filter(|&j| allowed(j)).map(|j| row[j]).fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                continue;
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0f32;
            for j in 0..n {
                if allowed(j) {
                    dst[j] = (row[j] - max).exp();
                    z += dst[j];
                }
            }
            let inv = 1.0 / z;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), needs))
    }

    /// Mean cross-entropy of `logits` (`n x M`) against integer targets.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim(
                "softmax_ce",
                format!("logits {s:?} for {} targets", targets.len()),
            ));
        }
        let (n, m) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::Index(format!("target {t} out of range for {m} classes")));
        }
        let mut probs = vec![0.0f32; n * m];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &x.data()[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let lse = max as f64 + z.ln();
            loss += lse - row[targets[i]] as f64;
            for j in 0..m {
                probs[i * m + j] = (((row[j] - max) as f64).exp() / z) as f32;
            }
        }
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar((loss / n.max(1) as f64) as f32),
            Op::SoftmaxCe {
                logits,
                targets: Rc::new(targets.to_vec()),
                probs,
            },
            needs,
        ))
    }

    /// Resizes the two trailing axes of an `N x C x H x W` tensor.
    pub fn interpolate_2d(&mut self, a: Var, out_h: usize, out_w: usize, mode: Interp) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::dim("interpolate_2d", format!("input {s:?} to {out_h}x{out_w}")));
        }
        if s[2] == out_h && s[3] == out_w && mode != Interp::Area {
            // Same-size bilinear/nearest sampling is the identity.
            let t = self.value(a).clone();
            let needs = self.ng(a);
            return Ok(self.push(t, Op::Reshape(a), needs));
        }
        let rows = Rc::new(AxisMap::new(mode, s[2], out_h));
        let cols = Rc::new(AxisMap::new(mode, s[3], out_w));
        let out = resample::forward(self.value(a).data(), s[0] * s[1], &rows, &cols);
        let t = Tensor::new([s[0], s[1], out_h, out_w], out)?;
        let needs = self.ng(a);
        Ok(self.push(t, Op::Resample { x: a, rows, cols }, needs))
    }

    /// 2D convolution; weight is `O x C/groups x kh x kw`, bias `O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(Error::shapes("conv2d bias", self.shape(b), &[geom.o]));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        self.counters.macs += geom.macs();
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }, needs))
    }

    /// Rows of a `M x c` table selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", format!("table must be a matrix, got {s:?}")));
        }
        let (m, c) = (s[0], s[1]);
        if let Some(&i) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!("row {i} out of range for table of {m}")));
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        let needs = self.ng(table);
        let t = Tensor::new([idx.len(), c], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                idx: Rc::new(idx.to_vec()),
            },
            needs,
        ))
    }

    /// Rotates `L x (heads * head_dim)` features by a rotary table.
    pub fn rope(&mut self, a: Var, table: &Rc<RopeTable>) -> Result<Var> {
        let s = self.shape(a);
        let hd = table.head_dim();
        if s.len() != 2 || s[0] != table.tokens || !s[1].is_multiple_of(hd) {
            return Err(Error::dim(
                "rope",
                format!("input {s:?} for {} tokens with head_dim {hd}", table.tokens),
            ));
        }
        let out = rotate(self.value(a), table, false);
        let needs = self.ng(a);
        Ok(self.push(out, Op::Rope { x: a, table: table.clone() }, needs))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d(loss)/d(node) for every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let (na, nb) = (self.ng(*a), self.ng(*b));
                let (da, db) = (xa.data(), xb.data());
                if xa.shape() == xb.shape() {
                    let zip = |f: &dyn Fn(usize) -> f32| (0..gd.len()).map(f).collect::<Vec<f32>>();
                    if na {
                        let ga = match op {
                            BinOp::Add | BinOp::Sub => gd.to_vec(),
                            BinOp::Mul => zip(&|i| gd[i] * db[i]),
                            BinOp::Div => zip(&|i| gd[i] / db[i]),
                        };
                        acc(*a, Tensor::new(xa.shape().to_vec(), ga).unwrap());
                    }
                    if nb {
                        let gb = match op {
                            BinOp::Add => gd.to_vec(),
                            BinOp::Sub => zip(&|i| -gd[i]),
                            BinOp::Mul => zip(&|i| gd[i] * da[i]),
                            BinOp::Div => zip(&|i| -gd[i] * da[i] / (db[i] * db[i])),
                        };
                        acc(*b, Tensor::new(xb.shape().to_vec(), gb).unwrap());
                    }
                    return;
                }
                let mut ga = vec![0.0f32; if na { xa.numel() } else { 0 }];
                let mut gb = vec![0.0f32; if nb { xb.numel() } else { 0 }];
                for_each_bcast(out_shape, xa.shape(), xb.shape(), |o, ia, ib| {
                    let gv = gd[o];
                    let (ca, cb) = match op {
                        BinOp::Add => (gv, gv),
                        BinOp::Sub => (gv, -gv),
                        BinOp::Mul => (gv * db[ib], gv * da[ia]),
                        BinOp::Div => (gv / db[ib], -gv * da[ia] / (db[ib] * db[ib])),
                    };
                    if na {
                        ga[ia] += ca;
                    }
                    if nb {
                        gb[ib] += cb;
                    }
                });
                if na {
                    acc(*a, Tensor::new(xa.shape().to_vec(), ga).unwrap());
                }
                if nb {
                    acc(*b, Tensor::new(xb.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let out: Vec<f32> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| match op {
                        UnOp::Relu => {
                            if x[i] > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        }
                        UnOp::Gelu => gv * gelu_grad(x[i]),
                        UnOp::Sigmoid => gv * y[i] * (1.0 - y[i]),
                        UnOp::Abs => {
                            if x[i] > 0.0 {
                                gv
                            } else if x[i] < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        }
                        UnOp::Square => 2.0 * x[i] * gv,
                    })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), out).unwrap());
            }
            Op::Matmul(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
                if self.ng(*a) {
                    let mut ga = vec![0.0f32; m * k];
                    gemm(m, n, k, gd, false, xb.data(), true, &mut ga, 0.0);
                    acc(*a, Tensor::new([m, k], ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0f32; k * n];
                    gemm(k, m, n, xa.data(), true, gd, false, &mut gb, 0.0);
                    acc(*b, Tensor::new([k, n], gb).unwrap());
                }
            }
            Op::Transpose(a) => acc(*a, transpose2d(g)),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                acc(*a, permute_tensor(g, &inv));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                acc(*a, g.clone().reshape(shape).unwrap());
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(*p).to_vec();
                    let len = ps[*axis];
                    if self.ng(*p) {
                        let mut out = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        acc(*p, Tensor::new(ps, out).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let mut out = vec![0.0f32; xs.iter().product()];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    out[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::new(xs, out).unwrap());
            }
            Op::SumTo(a) => acc(*a, expand_to(g, self.shape(*a))),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a).to_vec(), gd[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1) as f32;
                acc(*a, Tensor::full(self.shape(*a).to_vec(), gd[0] / n));
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut out = vec![0.0f32; y.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                    let mg = gr.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| (a * b) as f64).sum::<f64>() / n as f64;
                    for j in 0..n {
                        out[r * n + j] = (rs as f64 * (gr[j] as f64 - mg - yr[j] as f64 * mgy)) as f32;
                    }
                }
                acc(*x, Tensor::new(node.value.shape().to_vec(), out).unwrap());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut out = vec![0.0f32; y.len()];
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::new(node.value.shape().to_vec(), out).unwrap());
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let s = self.shape(*logits).to_vec();
                let (n, m) = (s[0], s[1]);
                let scale = gd[0] / n.max(1) as f32;
                let mut out: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    out[i * m + t] -= scale;
                }
                acc(*logits, Tensor::new(s, out).unwrap());
            }
            Op::Resample { x, rows, cols } => {
                let xs = self.shape(*x).to_vec();
                let out = resample::backward(gd, xs[0] * xs[1], rows, cols);
                acc(*x, Tensor::new(xs, out).unwrap());
            }
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) = conv::backward(
                    geom,
                    gd,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(gx) = gx {
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), gx).unwrap());
                }
                if let Some(gw) = gw {
                    acc(*w, Tensor::new(self.shape(*w).to_vec(), gw).unwrap());
                }
                if let Some(b) = b {
                    acc(*b, Tensor::new([geom.o], gb).unwrap());
                }
            }
            Op::Gather { table, idx } => {
                let s = self.shape(*table).to_vec();
                let c = s[1];
                let mut out = vec![0.0f32; s[0] * c];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += gd[r * c + j];
                    }
                }
                acc(*table, Tensor::new(s, out).unwrap());
            }
            Op::Rope { x, table } => acc(*x, rotate(g, table, true)),
        }
    }
}

fn op_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

// libm's tanhf dominates transformer steps; expm1 keeps small inputs exact.
fn fast_tanh(u: f32) -> f32 {
    if u.abs() > 9.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp_m1();
    e / (e + 2.0)
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn rotate(x: &Tensor, table: &RopeTable, inverse: bool) -> Tensor {
    let (l, width) = (x.shape()[0], x.shape()[1]);
    let hd = table.head_dim();
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for t in 0..l {
        for h in 0..width / hd {
            for p in 0..table.pairs {
                let i0 = t * width + h * hd + 2 * p;
                let c = table.cos[t * table.pairs + p];
                let s = if inverse { -table.sin[t * table.pairs + p] } else { table.sin[t * table.pairs + p] };
                let (a, b) = (src[i0], src[i0 + 1]);
                out[i0] = a * c - b * s;
                out[i0 + 1] = a * s + b * c;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn transpose2d(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new([c, r], out).unwrap()
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let s = x.shape();
    let in_strides = strides(s);
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; s.len()];
    let d = x.data();
    let mut off = 0usize;
    for _ in 0..x.numel() {
        out.push(d[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let (na, nb): (usize, usize) = (sa.iter().product(), sb.iter().product());
    if sa == out && sb == out {
        for o in 0..numel {
            f(o, o, o);
        }
        return;
    }
    if sa == out && out.ends_with(sb) {
        for o0 in (0..numel).step_by(nb) {
            for j in 0..nb {
                f(o0 + j, o0 + j, j);
            }
        }
        return;
    }
    if sb == out && out.ends_with(sa) {
        for o0 in (0..numel).step_by(na) {
            for j in 0..na {
                f(o0 + j, j, o0 + j);
            }
        }
        return;
    }
    let ta = bcast_strides(sa, out);
    let tb = bcast_strides(sb, out);
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            ia += ta[ax];
            ib += tb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= ta[ax] * idx[ax];
            ib -= tb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `x` down to `shape` (which must broadcast to `x.shape()`).
pub(crate) fn reduce_to(x: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0f32; shape.iter().product()];
    let d = x.data();
    for_each_bcast(x.shape(), x.shape(), shape, |o, _, it| out[it] += d[o]);
    Tensor::new(shape.to_vec(), out).unwrap()
}

fn expand_to(x: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0f32; shape.iter().product()];
    let d = x.data();
    for_each_bcast(shape, shape, x.shape(), |o, _, is| out[o] = d[is]);
    Tensor::new(shape.to_vec(), out).unwrap()
}
