//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly, appends one node, and checks its output
//! for NaN/Inf. `backward` walks the tape once in reverse insertion order, so
//! gradient accumulation order is fixed by the order the forward pass ran in.

use rand::Rng;

use super::tensor::{axis_split, matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Index of a parameter in a [`crate::params::ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L1Normalize { x: Var, axis: usize, sums: Vec<f64> },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, pad: usize, stride: usize },
    AvgPool2d { x: Var, k: usize, pad: usize, stride: usize },
    MeanAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Index(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of an eager computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_signature: u64,
    degenerate_slices: usize,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

const FNV_PRIME: u64 = 0x100_0000_01b3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), kink_signature: FNV_OFFSET, degenerate_slices: 0 }
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

    /// Hash of the branch taken by every non-smooth primitive (ReLU, LeakyReLU,
    /// |x|). Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    /// Number of all-zero slices seen by `l1_normalize`.
    pub fn degenerate_slices(&self) -> usize {
        self.degenerate_slices
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name, node });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(node))
    }

    fn record_kinks(&mut self, data: &[f64]) {
        let mut h = self.kink_signature;
        for &v in data {
            h ^= (v >= 0.0) as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.kink_signature = h;
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize, op: &str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(NumericsError::Invalid(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, x: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(x) {
            [r, c] => Ok((*r, *c)),
            s => Err(NumericsError::Shape(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, "constant")
    }

    pub fn param(&mut self, id: ParamId, t: Tensor) -> Result<Var> {
        self.push(t, Op::Param(id), "param")
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul")?;
        let (k2, m) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(NumericsError::Shape(format!("matmul: {n}x{k} · {k2}x{m}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` for matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul_nt")?;
        let (m, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(NumericsError::Shape(format!("matmul_nt: {n}x{k} · ({m}x{k2})ᵀ")));
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::new(&[n, m], out)?, Op::MatMulNt(a, b), "matmul_nt")
    }

    /// `x · w (+ bias)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap();
        if self.shape(bias) != [width] {
            return Err(NumericsError::Shape(format!(
                "add_row: bias {:?} for last extent {width}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(width) {
            for (o, bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(v, Op::AddRow(x, bias), "add_row")
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(NumericsError::Shape(format!(
                "add_const: {:?} vs {:?}",
                self.shape(x),
                c.shape()
            )));
        }
        let v = self.value(x).zip_map(c, |a, b| a + b);
        self.push(v, Op::AddConst(x), "add_const")
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(NumericsError::Shape(format!(
                "mul_const: {:?} vs {:?}",
                self.shape(x),
                c.shape()
            )));
        }
        let v = self.value(x).zip_map(&c, |a, b| a * b);
        self.push(v, Op::MulConst(x, c), "mul_const")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c), "scale")
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(NumericsError::Shape(format!(
                "scale_by: scalar expected, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|a| a * sv);
        self.push(v, Op::ScaleBy(x, s), "scale_by")
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        let ones = Tensor::full(self.shape(x), 1.0);
        self.add_const(neg, &ones)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        self.record_kinks(&data);
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(NumericsError::Invalid(format!("leaky_relu: slope {slope} not in (0,1)")));
        }
        let data = self.value(x).data().to_vec();
        self.record_kinks(&data);
        let v = self.value(x).map(|a| leaky(a, slope));
        self.push(v, Op::LeakyRelu(x, slope), "leaky_relu")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        self.record_kinks(&data);
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x), "abs")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let v = softmax_axis(self.value(x), axis);
        self.push(v, Op::Softmax(x, axis), "softmax")
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let t = self.value(x);
        let (outer, len, inner) = t.axis_split(axis);
        let mut out = t.clone();
        let src = t.data();
        let dst = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    dst[at(j)] = src[at(j)] - lse;
                }
            }
        }
        self.push(out, Op::LogSoftmax(x, axis), "log_softmax")
    }

    /// Divides each slice along `axis` by its L1 norm. All-zero slices map to
    /// zeros and are counted in [`Tape::degenerate_slices`].
    pub fn l1_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "l1_normalize")?;
        let t = self.value(x);
        let (outer, len, inner) = t.axis_split(axis);
        let mut out = t.clone();
        let mut sums = Vec::with_capacity(outer * inner);
        let mut degenerate = 0;
        {
            let src = t.data();
            let dst = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let s: f64 = (0..len).map(|j| src[at(j)].abs()).sum();
                    sums.push(s);
                    for j in 0..len {
                        dst[at(j)] = if s > 0.0 { src[at(j)] / s } else { 0.0 };
                    }
                    if s == 0.0 {
                        degenerate += 1;
                    }
                }
            }
        }
        if degenerate > 0 {
            log::warn!("l1_normalize: {degenerate} all-zero slice(s) mapped to zeros");
            self.degenerate_slices += degenerate;
        }
        self.push(out, Op::L1Normalize { x, axis, sums }, "l1_normalize")
    }

    /// Standardizes each slice along the last axis, then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().unwrap();
        if self.shape(gain) != [width] || self.shape(shift) != [width] {
            return Err(NumericsError::Shape(format!(
                "layer_norm: gain {:?}/shift {:?} for width {width}",
                self.shape(gain),
                self.shape(shift)
            )));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(shift).data();
        let rows = src.len() / width;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for t in 0..width {
                let xh = (row[t] - mean) * inv;
                xhat[r * width + t] = xh;
                out[r * width + t] = xh * g[t] + b[t];
            }
        }
        let v = Tensor::new(src.shape(), out)?;
        self.push(v, Op::LayerNorm { x, gain, shift, xhat, inv_std }, "layer_norm")
    }

    /// Cross-correlation of a `cin×h×w` input with `cout×cin×k×k` kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        pad: usize,
        stride: usize,
    ) -> Result<Var> {
        let (cin, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(NumericsError::Shape(format!("conv2d: input must be c×h×w, got {s:?}"))),
        };
        let (cout, kc, k) = match self.shape(kernel) {
            [o, c, kh, kw] if kh == kw => (*o, *c, *kh),
            s => return Err(NumericsError::Shape(format!("conv2d: kernel must be o×c×k×k, got {s:?}"))),
        };
        if kc != cin {
            return Err(NumericsError::Shape(format!("conv2d: kernel expects {kc} channels, input has {cin}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(NumericsError::Shape(format!("conv2d: bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        let (ho, wo) = pooled_extent(h, w, k, pad, stride, "conv2d")?;
        let xin = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            if let Some(b) = bias {
                let bv = self.nodes[b.0].value.data()[o];
                plane.iter_mut().for_each(|v| *v = bv);
            }
            for c in 0..cin {
                for dy in 0..k {
                    for dx in 0..k {
                        let kv = kd[((o * cin + c) * k + dy) * k + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in 0..ho {
                            let Some(iy) = (y * stride + dy).checked_sub(pad).filter(|&v| v < h) else {
                                continue;
                            };
                            let irow = &xin[(c * h + iy) * w..(c * h + iy + 1) * w];
                            let orow = &mut plane[y * wo..(y + 1) * wo];
                            for (xo, ov) in orow.iter_mut().enumerate() {
                                if let Some(ix) = (xo * stride + dx).checked_sub(pad).filter(|&v| v < w) {
                                    *ov += kv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[cout, ho, wo], out)?;
        self.push(v, Op::Conv2d { x, kernel, bias, pad, stride }, "conv2d")
    }

    /// Mean over each `k×k` window; padded cells are excluded from the count.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, pad: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(NumericsError::Shape(format!("avg_pool2d: input must be c×h×w, got {s:?}"))),
        };
        let (ho, wo) = pooled_extent(h, w, k, pad, stride, "avg_pool2d")?;
        let xin = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let (ys, ye) = window(y, k, pad, stride, h);
                    let (xs, xe) = window(xo, k, pad, stride, w);
                    let mut s = 0.0;
                    for iy in ys..ye {
                        for ix in xs..xe {
                            s += xin[(ch * h + iy) * w + ix];
                        }
                    }
                    let count = (ye - ys) * (xe - xs);
                    out[(ch * ho + y) * wo + xo] = if count > 0 { s / count as f64 } else { 0.0 };
                }
            }
        }
        let v = Tensor::new(&[c, ho, wo], out)?;
        self.push(v, Op::AvgPool2d { x, k, pad, stride }, "avg_pool2d")
    }

    /// Mean along `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let t = self.value(x);
        let (outer, len, inner) = t.axis_split(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::MeanAxis(x, axis), "mean_axis")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "narrow")?;
        let t = self.value(x);
        let (outer, full, inner) = t.axis_split(axis);
        if len == 0 || start + len > full {
            return Err(NumericsError::Shape(format!(
                "narrow: [{start}, {}) out of extent {full}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::Narrow { x, axis, start }, "narrow")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Invalid("concat: no inputs".into()))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::Shape(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = self.shape(p).to_vec();
            if axis > shape.len() {
                return Err(NumericsError::Invalid(format!("stack: axis {axis} for rank {}", shape.len())));
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(p, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    /// Picks index `i` along `axis`, removing the axis.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Result<Var> {
        let n = self.narrow(x, axis, i, 1)?;
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(n, &shape)
    }

    /// Element `i` of the flattened tensor, as a one-element tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if i >= t.len() {
            return Err(NumericsError::Shape(format!("index {i} out of {}", t.len())));
        }
        let v = Tensor::scalar(t.data()[i]);
        self.push(v, Op::Index(x, i), "index")
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::Invalid(format!("dropout: rate {rate} not in [0,1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let len = self.value(x).len();
        let mask: Vec<f64> = (0..len)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, Tensor::new(&shape, mask)?)
    }

    /// Gradients of the single-element node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::Shape(format!(
                "backward: root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Parameter gradients in tape order; a parameter used several times is
    /// reported once per use.
    pub fn param_grads<'a>(&'a self, grads: &'a Gradients) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => grads.grads[i].as_ref().map(|g| (id, g)),
            _ => None,
        })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                // dA = G·Bᵀ, dB = Aᵀ·G
                let da = matmul_nt_raw(g.data(), self.value(*b).data(), n, m, k);
                let db = matmul_tn_raw(self.value(*a).data(), g.data(), n, k, m);
                accumulate(grads, *a, da, self.shape(*a));
                accumulate(grads, *b, db, self.shape(*b));
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                // y = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let da = matmul_raw(g.data(), self.value(*b).data(), n, m, k);
                let db = matmul_tn_raw(g.data(), self.value(*a).data(), n, m, k);
                accumulate(grads, *a, da, self.shape(*a));
                accumulate(grads, *b, db, self.shape(*b));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.data().to_vec(), g.shape());
                accumulate(grads, *b, g.data().to_vec(), g.shape());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.data().to_vec(), g.shape());
                accumulate(grads, *b, g.data().iter().map(|v| -v).collect(), g.shape());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                accumulate(grads, *a, g.zip_map(vb, |x, y| x * y).into_data(), g.shape());
                accumulate(grads, *b, g.zip_map(va, |x, y| x * y).into_data(), g.shape());
            }
            Op::AddRow(x, b) => {
                let width = self.shape(*b)[0];
                let mut db = vec![0.0; width];
                for chunk in g.data().chunks(width) {
                    for (d, v) in db.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, g.data().to_vec(), g.shape());
                accumulate(grads, *b, db, &[width]);
            }
            Op::AddConst(x) => accumulate(grads, *x, g.data().to_vec(), g.shape()),
            Op::MulConst(x, c) => {
                accumulate(grads, *x, g.zip_map(c, |a, b| a * b).into_data(), g.shape())
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.data().iter().map(|v| v * c).collect(), g.shape()),
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                let vx = self.value(*x);
                let ds: f64 = g.data().iter().zip(vx.data()).map(|(a, b)| a * b).sum();
                accumulate(grads, *x, g.data().iter().map(|v| v * sv).collect(), g.shape());
                accumulate(grads, *s, vec![ds], self.shape(*s));
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(y, |gv, s| gv * s * (1.0 - s));
                accumulate(grads, *x, d.into_data(), g.shape());
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, *x, d.into_data(), g.shape());
            }
            Op::LeakyRelu(x, slope) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv >= 0.0 { gv } else { gv * slope });
                accumulate(grads, *x, d.into_data(), g.shape());
            }
            Op::Abs(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, d.into_data(), g.shape());
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = y.axis_split(*axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, d, y.shape());
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = y.axis_split(*axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let gsum: f64 = (0..len).map(|j| g.data()[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = g.data()[at(j)] - y.data()[at(j)].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *x, d, y.shape());
            }
            Op::L1Normalize { x, axis, sums } => {
                let xv = self.value(*x);
                let (outer, len, inner) = y.axis_split(*axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let s = sums[o * inner + i];
                        if s == 0.0 {
                            continue;
                        }
                        let at = |j: usize| o * len * inner + j * inner + i;
                        // y_j = x_j / s  =>  dx_j = g_j / s - sign(x_j) Σ_k g_k y_k / s
                        let gy: f64 = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                        for j in 0..len {
                            let sign = xv.data()[at(j)].signum() * (xv.data()[at(j)] != 0.0) as u8 as f64;
                            d[at(j)] = (g.data()[at(j)] - sign * gy) / s;
                        }
                    }
                }
                accumulate(grads, *x, d, y.shape());
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let width = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                let rows = y.len() / width;
                let mut dx = vec![0.0; y.len()];
                let mut dgain = vec![0.0; width];
                let mut dshift = vec![0.0; width];
                for r in 0..rows {
                    let gr = &g.data()[r * width..(r + 1) * width];
                    let xh = &xhat[r * width..(r + 1) * width];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for t in 0..width {
                        dgain[t] += gr[t] * xh[t];
                        dshift[t] += gr[t];
                        let dxh = gr[t] * gv[t];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[t];
                    }
                    let wf = width as f64;
                    for t in 0..width {
                        let dxh = gr[t] * gv[t];
                        dx[r * width + t] = inv_std[r] * (dxh - sum_dxh / wf - xh[t] * sum_dxh_xh / wf);
                    }
                }
                accumulate(grads, *x, dx, y.shape());
                accumulate(grads, *gain, dgain, &[width]);
                accumulate(grads, *shift, dshift, &[width]);
            }
            Op::Conv2d { x, kernel, bias, pad, stride } => {
                let (cin, h, w) = {
                    let s = self.shape(*x);
                    (s[0], s[1], s[2])
                };
                let (cout, k) = (self.shape(*kernel)[0], self.shape(*kernel)[2]);
                let (ho, wo) = (y.shape()[1], y.shape()[2]);
                let xin = self.value(*x).data();
                let kd = self.value(*kernel).data();
                let gd = g.data();
                let mut dx = vec![0.0; xin.len()];
                let mut dk = vec![0.0; kd.len()];
                for o in 0..cout {
                    let gplane = &gd[o * ho * wo..(o + 1) * ho * wo];
                    for c in 0..cin {
                        for dy in 0..k {
                            for ddx in 0..k {
                                let kidx = ((o * cin + c) * k + dy) * k + ddx;
                                let kv = kd[kidx];
                                let mut acc = 0.0;
                                for yy in 0..ho {
                                    let Some(iy) = (yy * stride + dy).checked_sub(*pad).filter(|&v| v < h) else {
                                        continue;
                                    };
                                    let base = (c * h + iy) * w;
                                    for xo in 0..wo {
                                        if let Some(ix) = (xo * stride + ddx).checked_sub(*pad).filter(|&v| v < w) {
                                            let gv = gplane[yy * wo + xo];
                                            acc += gv * xin[base + ix];
                                            dx[base + ix] += gv * kv;
                                        }
                                    }
                                }
                                dk[kidx] += acc;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx, self.shape(*x));
                accumulate(grads, *kernel, dk, self.shape(*kernel));
                if let Some(b) = bias {
                    let db: Vec<f64> = (0..cout).map(|o| gd[o * ho * wo..(o + 1) * ho * wo].iter().sum()).collect();
                    accumulate(grads, *b, db, &[cout]);
                }
            }
            Op::AvgPool2d { x, k, pad, stride } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (y.shape()[1], y.shape()[2]);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..ho {
                        for xo in 0..wo {
                            let (ys, ye) = window(yy, *k, *pad, *stride, h);
                            let (xs, xe) = window(xo, *k, *pad, *stride, w);
                            let count = (ye - ys) * (xe - xs);
                            if count == 0 {
                                continue;
                            }
                            let gv = g.data()[(ch * ho + yy) * wo + xo] / count as f64;
                            for iy in ys..ye {
                                for ix in xs..xe {
                                    dx[(ch * h + iy) * w + ix] += gv;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx, &[c, h, w]);
            }
            Op::MeanAxis(x, axis) => {
                let xs = self.shape(*x);
                let (outer, len, inner) = axis_split(xs, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = g.data()[o * inner + i] / len as f64;
                        }
                    }
                }
                accumulate(grads, *x, d, xs);
            }
            Op::SumAll(x) => {
                let gv = g.item();
                accumulate(grads, *x, vec![gv; self.value(*x).len()], self.shape(*x));
            }
            Op::Reshape(x) => accumulate(grads, *x, g.data().to_vec(), self.shape(*x)),
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = axis_split(xs, *axis);
                let len = y.shape()[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, d, xs);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = y.axis_split(*axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let len = ps[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(grads, p, d, ps);
                    offset += len;
                }
            }
            Op::Index(x, i) => {
                let xs = self.shape(*x);
                let mut d = vec![0.0; self.value(*x).len()];
                d[*i] = g.item();
                accumulate(grads, *x, d, xs);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Vec<f64>, shape: &[usize]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape, d).expect("gradient shape matches node"));
        }
    }
}

pub(crate) fn leaky(a: f64, slope: f64) -> f64 {
    if a >= 0.0 {
        a
    } else {
        slope * a
    }
}

pub(crate) fn softmax_axis(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = t.axis_split(axis);
    let mut out = t.clone();
    let src = t.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                dst[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                dst[at(j)] /= total;
            }
        }
    }
    out
}

fn pooled_extent(h: usize, w: usize, k: usize, pad: usize, stride: usize, op: &str) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(NumericsError::Invalid(format!("{op}: kernel and stride must be positive")));
    }
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(NumericsError::Shape(format!(
            "{op}: kernel {k} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

/// Valid input range `[start, end)` covered by output cell `o`.
fn window(o: usize, k: usize, pad: usize, stride: usize, extent: usize) -> (usize, usize) {
    let lo = (o * stride) as isize - pad as isize;
    let hi = lo + k as isize;
    (lo.max(0) as usize, (hi.min(extent as isize)).max(0) as usize)
}
