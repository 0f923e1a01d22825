use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBroadcast(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    MeanAxis { x: usize, axis: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Reshape(usize),
    Transpose(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    GatherRows { x: usize, rows: Vec<usize> },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry, cols: Vec<f64> },
    LayerNorm { x: usize, inv_std: Vec<f64> },
}

impl Op {
    #[cfg_attr(not(debug_assertions), allow(dead_code))]
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddBroadcast(a, b)
            | Op::Maximum(a, b)
            | Op::Minimum(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Abs(x)
            | Op::ClampMin(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Transpose(x) => vec![*x],
            Op::MeanAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Narrow { x, .. }
            | Op::GatherRows { x, .. }
            | Op::LayerNorm { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order; [`Graph::backward`] walks them in
/// reverse, so every node is visited exactly once and a value consumed by
/// several ops receives the sum of their contributions.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

/// `(outer, len, inner)` decomposition of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        #[cfg(debug_assertions)]
        if !value.all_finite() && inputs.iter().all(|&i| self.nodes[i].value.all_finite()) {
            panic!("{}: non-finite output from finite inputs", op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter. Repeated calls with the same id return the
    /// same leaf, so shared weights accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut value = store.get(id).clone();
        value.zero_grad();
        let v = self.leaf(value);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
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

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad shape"))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape(), data).expect("unary shape");
        self.push(out, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a.0, b.0))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a.0, b.0))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (e.g. a bias row).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::shape("add_broadcast", sx, sy));
        }
        let ty = self.value(y).data();
        let n = ty.len();
        let tx = self.value(x);
        let data = tx
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(ty).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.push(out, Op::AddBroadcast(x.0, y.0)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x.0, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x.0))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x.0))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, |v| v.max(lo), Op::ClampMin(x.0, lo))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x.0))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange { op: "mean_axis", axis, rank: shape.len() });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                for (d, s) in data[o * inner..][..inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::MeanAxis { x: x.0, axis }))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_value(x, axis, "softmax", false)?;
        Ok(self.push(out, Op::Softmax { x: x.0, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_value(x, axis, "log_softmax", true)?;
        Ok(self.push(out, Op::LogSoftmax { x: x.0, axis }))
    }

    fn softmax_value(&self, x: Var, axis: usize, op: &'static str, log: bool) -> Result<Tensor> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::AxisOutOfRange { op, axis, rank: t.rank() });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    data[at(l)] = e;
                    z += e;
                }
                if log {
                    let lz = z.ln();
                    for l in 0..len {
                        data[at(l)] = src[at(l)] - max - lz;
                    }
                } else {
                    for l in 0..len {
                        data[at(l)] /= z;
                    }
                }
            }
        }
        Tensor::new(t.shape(), data)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0)))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(&[c, r], data)?;
        Ok(self.push(out, Op::Transpose(x.0)))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::AxisOutOfRange { op: "narrow", axis, rank: t.rank() });
        }
        if len == 0 || start + len > t.shape()[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} outside axis of size {}", start + len, t.shape()[axis]),
            ));
        }
        let (outer, full, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Narrow { x: x.0, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::AxisOutOfRange { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat { xs: xs.iter().map(|v| v.0).collect(), axis }))
    }

    /// Select rows (first-axis entries) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range {n}")));
        }
        let inner = t.numel() / n;
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * inner..][..inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::GatherRows { x: x.0, rows: rows.to_vec() }))
    }

    /// 2-D convolution of `x[c_in×h×w]` with `w[c_out×c_in×kh×kw]`,
    /// optional bias `[c_out]`. Output `[c_out×h'×w']` with
    /// `h' = (h + 2·padding − kh) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (wd + 2 * padding - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let n = geom.out_len();
        let mut data = vec![0.0; c_out * n];
        if let Some(b) = b {
            for (row, &bias) in data.chunks_exact_mut(n).zip(self.value(b).data()) {
                row.fill(bias);
            }
        }
        kernels::matmul_acc(self.value(w).data(), &cols, &mut data, c_out, geom.patch_len(), n);
        let out = Tensor::new(&[c_out, geom.h_out, geom.w_out], data)?;
        Ok(self.push(out, Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), geom, cols }))
    }

    /// Parameter-free normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().expect("rank ≥ 1");
        let mut data = vec![0.0; t.numel()];
        let mut inv_std = Vec::with_capacity(t.numel() / d);
        for (src, dst) in t.data().chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(t.shape(), data).expect("layer_norm shape");
        self.push(out, Op::LayerNorm { x: x.0, inv_std })
    }

    /// Affine map along the last axis: `x[..×d_in] · w[d_in×d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().expect("rank ≥ 1");
        if sw.len() != 2 || sw[0] != d_in {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let rows = sx.iter().product::<usize>() / d_in;
        let flat = if sx.len() == 2 { x } else { self.reshape(x, &[rows, d_in])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(Error::shape("linear bias", self.shape(b), &[sw[1]]));
            }
            y = self.add_broadcast(y, b)?;
        }
        if sx.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    /// Reverse-mode sweep from a scalar loss. Afterwards every tracked leaf
    /// holds its gradient (see [`Graph::grad`]); intermediate gradients are
    /// released as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            self.propagate(i, &dy, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        let tracked = |j: usize| self.nodes[j].requires_grad;
        let len = |j: usize| self.nodes[j].value.numel();
        macro_rules! each {
            ($j:expr, |$k:ident| $e:expr) => {{
                let j = $j;
                if tracked(j) {
                    let g = accumulate(grads, j, len(j));
                    for ($k, gk) in g.iter_mut().enumerate() {
                        *gk += $e;
                    }
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if tracked(a) {
                    let g = accumulate(grads, a, m * k);
                    kernels::matmul_nt_acc(dy, val(b), g, m, n, k);
                }
                if tracked(b) {
                    let g = accumulate(grads, b, k * n);
                    kernels::matmul_tn_acc(val(a), dy, g, m, k, n);
                }
            }
            &Op::Add(a, b) => {
                each!(a, |k| dy[k]);
                each!(b, |k| dy[k]);
            }
            &Op::Sub(a, b) => {
                each!(a, |k| dy[k]);
                each!(b, |k| -dy[k]);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                each!(a, |k| dy[k] * vb[k]);
                each!(b, |k| dy[k] * va[k]);
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                each!(a, |k| dy[k] / vb[k]);
                each!(b, |k| -dy[k] * va[k] / (vb[k] * vb[k]));
            }
            &Op::AddBroadcast(x, b) => {
                each!(x, |k| dy[k]);
                if tracked(b) {
                    let n = len(b);
                    let g = accumulate(grads, b, n);
                    for row in dy.chunks_exact(n) {
                        for (gk, d) in g.iter_mut().zip(row) {
                            *gk += d;
                        }
                    }
                }
            }
            &Op::Scale(x, s) => each!(x, |k| dy[k] * s),
            &Op::AddScalar(x) => each!(x, |k| dy[k]),
            &Op::Relu(x) => {
                let vx = val(x);
                each!(x, |k| if vx[k] > 0.0 { dy[k] } else { 0.0 });
            }
            &Op::Sigmoid(x) => each!(x, |k| dy[k] * y[k] * (1.0 - y[k])),
            &Op::Exp(x) => each!(x, |k| dy[k] * y[k]),
            &Op::Ln(x) => {
                let vx = val(x);
                each!(x, |k| dy[k] / vx[k]);
            }
            &Op::Abs(x) => {
                let vx = val(x);
                each!(x, |k| dy[k] * if vx[k] > 0.0 { 1.0 } else if vx[k] < 0.0 { -1.0 } else { 0.0 });
            }
            &Op::Maximum(a, b) => {
                let (va, vb) = (val(a), val(b));
                each!(a, |k| if va[k] >= vb[k] { dy[k] } else { 0.0 });
                each!(b, |k| if va[k] >= vb[k] { 0.0 } else { dy[k] });
            }
            &Op::Minimum(a, b) => {
                let (va, vb) = (val(a), val(b));
                each!(a, |k| if va[k] <= vb[k] { dy[k] } else { 0.0 });
                each!(b, |k| if va[k] <= vb[k] { 0.0 } else { dy[k] });
            }
            &Op::ClampMin(x, lo) => {
                let vx = val(x);
                each!(x, |k| if vx[k] > lo { dy[k] } else { 0.0 });
            }
            &Op::Sum(x) => each!(x, |_k| dy[0]),
            &Op::Mean(x) => {
                let n = len(x) as f64;
                each!(x, |_k| dy[0] / n);
            }
            &Op::MeanAxis { x, axis } => {
                if tracked(x) {
                    let (outer, l, inner) = split_axis(self.nodes[x].value.shape(), axis);
                    let g = accumulate(grads, x, outer * l * inner);
                    for o in 0..outer {
                        for li in 0..l {
                            for ii in 0..inner {
                                g[(o * l + li) * inner + ii] += dy[o * inner + ii] / l as f64;
                            }
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } | &Op::LogSoftmax { x, axis } => {
                if tracked(x) {
                    let log = matches!(node.op, Op::LogSoftmax { .. });
                    let (outer, l, inner) = split_axis(node.value.shape(), axis);
                    let g = accumulate(grads, x, outer * l * inner);
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |li: usize| (o * l + li) * inner + ii;
                            if log {
                                let s: f64 = (0..l).map(|li| dy[at(li)]).sum();
                                for li in 0..l {
                                    g[at(li)] += dy[at(li)] - y[at(li)].exp() * s;
                                }
                            } else {
                                let s: f64 = (0..l).map(|li| dy[at(li)] * y[at(li)]).sum();
                                for li in 0..l {
                                    g[at(li)] += y[at(li)] * (dy[at(li)] - s);
                                }
                            }
                        }
                    }
                }
            }
            &Op::Reshape(x) => each!(x, |k| dy[k]),
            &Op::Transpose(x) => {
                if tracked(x) {
                    let s = node.value.shape();
                    let (r, c) = (s[0], s[1]);
                    // output is r×c, input c×r
                    let g = accumulate(grads, x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] += dy[i * c + j];
                        }
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                if tracked(x) {
                    let (outer, full, inner) = split_axis(self.nodes[x].value.shape(), axis);
                    let l = node.value.shape()[axis];
                    let g = accumulate(grads, x, outer * full * inner);
                    for o in 0..outer {
                        let dst = &mut g[(o * full + start) * inner..][..l * inner];
                        for (d, s) in dst.iter_mut().zip(&dy[o * l * inner..][..l * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let l = self.nodes[x].value.shape()[*axis];
                    if tracked(x) {
                        let g = accumulate(grads, x, outer * l * inner);
                        for o in 0..outer {
                            let src = &dy[(o * total + offset) * inner..][..l * inner];
                            for (d, s) in g[o * l * inner..][..l * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += l;
                }
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                if tracked(x) {
                    let n = len(x);
                    let inner = n / self.nodes[x].value.shape()[0];
                    let g = accumulate(grads, x, n);
                    for (slot, &r) in rows.iter().enumerate() {
                        for (d, s) in g[r * inner..][..inner].iter_mut().zip(&dy[slot * inner..][..inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let c_out = node.value.shape()[0];
                let n = geom.out_len();
                let patch = geom.patch_len();
                if tracked(*w) {
                    let g = accumulate(grads, *w, c_out * patch);
                    kernels::matmul_nt_acc(dy, cols, g, c_out, n, patch);
                }
                if let Some(b) = *b {
                    if tracked(b) {
                        let g = accumulate(grads, b, c_out);
                        for (gk, row) in g.iter_mut().zip(dy.chunks_exact(n)) {
                            *gk += row.iter().sum::<f64>();
                        }
                    }
                }
                if tracked(*x) {
                    let mut dcols = vec![0.0; patch * n];
                    kernels::matmul_tn_acc(val(*w), dy, &mut dcols, c_out, patch, n);
                    let g = accumulate(grads, *x, len(*x));
                    kernels::col2im_acc(&dcols, geom, g);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let x = *x;
                if tracked(x) {
                    let d = *node.value.shape().last().unwrap();
                    let g = accumulate(grads, x, len(x));
                    for (r, &is) in inv_std.iter().enumerate() {
                        let dyr = &dy[r * d..][..d];
                        let yr = &y[r * d..][..d];
                        let mean_dy = dyr.iter().sum::<f64>() / d as f64;
                        let mean_dyy = dyr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for k in 0..d {
                            g[r * d + k] += is * (dyr[k] - mean_dy - yr[k] * mean_dyy);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
