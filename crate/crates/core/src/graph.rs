//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every primitive records its inputs and whatever it needs for the backward
//! rule. Nodes are stored in creation order, so the tape is always in
//! topological order and [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use crate::conv::{self, ConvGeometry};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, Module, Param, Tensor};

/// Inputs to `exp` are clamped to this magnitude.
pub const EXP_CLAMP: f64 = 700.0;
/// `log` clamps its input from below to keep results finite.
pub const LOG_FLOOR: f64 = 1e-300;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Name of every recorded operation.
pub const OP_NAMES: [&str; 24] = [
    "leaf",
    "add",
    "sub",
    "mul",
    "div",
    "affine_scale_shift",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "softplus",
    "exp",
    "log",
    "softmax",
    "sum",
    "mean",
    "max",
    "reshape",
    "nearest_upsample",
    "maxpool2d",
    "global_avg_pool",
    "concat",
    "slice",
    "conv2d",
];

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine { x: usize, scale: f64 },
    MatMul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Softmax { x: usize, axis: usize },
    Sum { x: usize, axis: Option<usize> },
    Mean { x: usize, axis: Option<usize> },
    Max { x: usize, argmax: Vec<usize> },
    Reshape(usize),
    Upsample { x: usize, factor: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    GlobalAvgPool(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeometry },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine_scale_shift",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::Reshape(_) => "reshape",
            Op::Upsample { .. } => "nearest_upsample",
            Op::MaxPool2 { .. } => "maxpool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, Var>,
    fault: Option<&'static str>,
}

// ---------------------------------------------------------------------------
// broadcasting helpers

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(
                    op,
                    format!("dimension {i}: cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (0 where broadcast).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        if shape[i] != 1 {
            strides[o] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total = numel(out);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// View of `shape` as `[outer, len, inner]` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(a) => {
            let mut s = shape.to_vec();
            s[a] = 1;
            s
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: perturbs the backward rule of the named primitive.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn data(&self, v: usize) -> &[f64] {
        self.nodes[v].value.data()
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Binds a named parameter once per graph; repeated uses share the node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let mut t = p.value.clone();
        t.grad = None;
        let requires = p.value.requires_grad;
        let v = self.push(Op::Leaf, t, requires);
        self.params.insert(p.name.clone(), v);
        v
    }

    /// Copies gradients of every bound parameter into the module's grad slots.
    pub fn store_grads<M: Module + ?Sized>(&self, module: &mut M) {
        module.visit_mut(&mut |p| {
            p.value.grad = self
                .params
                .get(&p.name)
                .and_then(|v| self.grads.get(v.0).cloned().flatten());
        });
    }

    /// Index of the first node holding a non-finite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    /// Index and op name of the last-created node whose gradient is non-finite.
    pub fn last_non_finite_grad(&self) -> Option<(usize, &'static str)> {
        (0..self.nodes.len())
            .rev()
            .find(|&i| {
                self.grads
                    .get(i)
                    .and_then(|g| g.as_ref())
                    .is_some_and(|g| g.iter().any(|v| !v.is_finite()))
            })
            .map(|i| (i, self.nodes[i].op.name()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((node, op)) => Err(Error::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    // -----------------------------------------------------------------------
    // elementwise

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let rg = self.rg(a.0) || self.rg(b.0);
        if sa == sb {
            let data = self
                .data(a.0)
                .iter()
                .zip(self.data(b.0))
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok((Tensor::from_parts(sa, data), rg));
        }
        let out = broadcast_shape(op, &sa, &sb)?;
        let (xa, xb) = (self.data(a.0), self.data(b.0));
        let mut data = vec![0.0; numel(&out)];
        for_each_broadcast(
            &out,
            &broadcast_strides(&sa, &out),
            &broadcast_strides(&sb, &out),
            |o, i, j| {
                data[o] = f(xa[i], xb[j]);
            },
        );
        Ok((Tensor::from_parts(out, data), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), t, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(Op::Div(a.0, b.0), t, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.map(x, |v| scale * v + shift);
        let rg = self.rg(x.0);
        self.push(Op::Affine { x: x.0, scale }, t, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = &self.nodes[x.0].value;
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.map(x, f);
        let rg = self.rg(x.0);
        self.push(op, t, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.0), f64::tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x.0), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), |v| v.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x.0), |v| v.max(LOG_FLOOR).ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    // -----------------------------------------------------------------------
    // reductions

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn reduce_sum(&self, x: Var, axis: Option<usize>) -> Tensor {
        let shape = self.shape(x);
        let data = self.data(x.0);
        match axis {
            None => Tensor::scalar(data.iter().sum()),
            Some(a) => {
                let (outer, len, inner) = split_axis(shape, a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Tensor::from_parts(reduced_shape(shape, axis), out)
            }
        }
    }

    /// Sum over all elements (`axis = None`, scalar result) or one axis (kept as extent 1).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(a) = axis {
            self.check_axis("sum", x, a)?;
        }
        let t = self.reduce_sum(x, axis);
        let rg = self.rg(x.0);
        Ok(self.push(Op::Sum { x: x.0, axis }, t, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.sum(x, None).expect("no axis")
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(a) = axis {
            self.check_axis("mean", x, a)?;
        }
        let count = match axis {
            None => self.value(x).numel(),
            Some(a) => self.shape(x)[a],
        } as f64;
        let mut t = self.reduce_sum(x, axis);
        t.data_mut().iter_mut().for_each(|v| *v /= count);
        let rg = self.rg(x.0);
        Ok(self.push(Op::Mean { x: x.0, axis }, t, rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.mean(x, None).expect("no axis")
    }

    /// Maximum along `axis` (kept as extent 1); ties resolve to the lowest index.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.data(x.0);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    let dst = o * inner + i;
                    if data[src] > out[dst] {
                        out[dst] = data[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Op::Max { x: x.0, argmax },
            Tensor::from_parts(reduced_shape(&shape, Some(axis)), out),
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.data(x.0);
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| data[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (data[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(Op::Softmax { x: x.0, axis }, Tensor::from_parts(shape, out), rg))
    }

    // -----------------------------------------------------------------------
    // linear algebra and layout

    /// Rank-2 matrix product `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("operands must be rank 2, got {sa:?} and {sb:?}"),
            ));
        }
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("inner dimension: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        conv::gemm(m, k, n, self.data(a.0), k, 1, self.data(b.0), n, 1, 0.0, &mut out);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::MatMul(a.0, b.0), Tensor::from_parts(vec![m, n], out), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x.0);
        Ok(self.push(Op::Reshape(x.0), t, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("cannot join {base:?} with {s:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                out.extend_from_slice(&self.data(x.0)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = xs.iter().any(|x| self.rg(x.0));
        Ok(self.push(
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
            Tensor::from_parts(shape, out),
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!(
                    "range {start}..{} exceeds extent {} on axis {axis}",
                    start + len,
                    shape[axis]
                ),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let data = self.data(x.0);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&data[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(x.0);
        Ok(self.push(Op::Slice { x: x.0, axis, start }, Tensor::from_parts(s, out), rg))
    }

    // -----------------------------------------------------------------------
    // spatial ops on [N,C,H,W]

    fn nchw(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(shape_err(op, format!("expected [N,C,H,W], got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding, dilation)?;
        let out = conv::conv2d_forward(&geom, self.data(x.0), self.data(w.0));
        let rg = self.rg(x.0) || self.rg(w.0);
        Ok(self.push(
            Op::Conv2d { x: x.0, w: w.0, geom },
            Tensor::from_parts(geom.out_shape().to_vec(), out),
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw("nearest_upsample", x)?;
        if factor == 0 {
            return Err(Error::Invalid("upsample factor must be >= 1".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let data = self.data(x.0);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = data[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Op::Upsample { x: x.0, factor },
            Tensor::from_parts(vec![n, c, oh, ow], out),
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("maxpool2d", x)?;
        if h < 2 || w < 2 {
            return Err(shape_err(
                "maxpool2d",
                format!("spatial extent {h}x{w} smaller than the 2x2 window"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = self.data(x.0);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (p * h + 2 * y + dy) * w + 2 * xx + dx;
                            if data[i] > best {
                                best = data[i];
                                at = i;
                            }
                        }
                    }
                    let o = (p * oh + y) * ow + xx;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Op::MaxPool2 { x: x.0, argmax },
            Tensor::from_parts(vec![n, c, oh, ow], out),
            rg,
        ))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("global_avg_pool", x)?;
        let hw = (h * w) as f64;
        let out = self
            .data(x.0)
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(x.0);
        Ok(self.push(Op::GlobalAvgPool(x.0), Tensor::from_parts(vec![n, c], out), rg))
    }

    // -----------------------------------------------------------------------
    // backward

    fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], i: usize, g: impl FnOnce(&mut [f64])) {
        if !nodes[i].requires_grad {
            return;
        }
        let slot = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
        g(slot);
    }

    /// Populates gradients for every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            if self.fault == Some(node.op.name()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    Self::reduce_into(&mut grads, nodes, *a, out.shape(), &g, |_, _, gv| gv);
                    Self::reduce_into(&mut grads, nodes, *b, out.shape(), &g, |_, _, gv| sign * gv);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (xa, xb) = (nodes[a].value.data(), nodes[b].value.data());
                    Self::binary_back(&mut grads, nodes, a, b, out.shape(), &g, |ia, ib, gv| {
                        (gv * xb[ib], gv * xa[ia])
                    });
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let (xa, xb) = (nodes[a].value.data(), nodes[b].value.data());
                    Self::binary_back(&mut grads, nodes, a, b, out.shape(), &g, |ia, ib, gv| {
                        (gv / xb[ib], -gv * xa[ia] / (xb[ib] * xb[ib]))
                    });
                }
                Op::Affine { x, scale } => {
                    Self::acc(&mut grads, nodes, *x, |s| {
                        s.iter_mut().zip(&g).for_each(|(d, v)| *d += scale * v)
                    });
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (xa, xb) = (nodes[a].value.data(), nodes[b].value.data());
                    // dA = G * B^T, dB = A^T * G
                    Self::acc(&mut grads, nodes, a, |s| {
                        conv::gemm(m, n, k, &g, n, 1, xb, 1, n, 1.0, s)
                    });
                    Self::acc(&mut grads, nodes, b, |s| {
                        conv::gemm(k, m, n, xa, 1, k, &g, n, 1, 1.0, s)
                    });
                }
                Op::Relu(x) => {
                    let xv = nodes[*x].value.data();
                    Self::acc(&mut grads, nodes, *x, |s| {
                        for ((d, gv), xi) in s.iter_mut().zip(&g).zip(xv) {
                            if *xi > 0.0 {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => Self::pointwise_back(&mut grads, nodes, *x, out.data(), &g, |_, y| y * (1.0 - y)),
                Op::Tanh(x) => Self::pointwise_back(&mut grads, nodes, *x, out.data(), &g, |_, y| 1.0 - y * y),
                Op::Softplus(x) => Self::pointwise_back(&mut grads, nodes, *x, out.data(), &g, |xi, _| sigmoid(xi)),
                Op::Exp(x) => Self::pointwise_back(&mut grads, nodes, *x, out.data(), &g, |xi, y| {
                    if xi.abs() > EXP_CLAMP {
                        0.0
                    } else {
                        y
                    }
                }),
                Op::Log(x) => Self::pointwise_back(&mut grads, nodes, *x, out.data(), &g, |xi, _| {
                    if xi < LOG_FLOOR {
                        0.0
                    } else {
                        1.0 / xi
                    }
                }),
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    Self::acc(&mut grads, nodes, *x, |s| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |l: usize| (o * len + l) * inner + i;
                                let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                                for l in 0..len {
                                    s[at(l)] += y[at(l)] * (g[at(l)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let in_shape = nodes[*x].value.shape();
                    let scale = match (&node.op, axis) {
                        (Op::Mean { .. }, None) => 1.0 / nodes[*x].value.numel() as f64,
                        (Op::Mean { .. }, Some(a)) => 1.0 / in_shape[*a] as f64,
                        _ => 1.0,
                    };
                    match axis {
                        None => {
                            let gv = g[0] * scale;
                            Self::acc(&mut grads, nodes, *x, |s| s.iter_mut().for_each(|d| *d += gv));
                        }
                        Some(a) => {
                            let (outer, len, inner) = split_axis(in_shape, *a);
                            Self::acc(&mut grads, nodes, *x, |s| {
                                for o in 0..outer {
                                    for l in 0..len {
                                        for i in 0..inner {
                                            s[(o * len + l) * inner + i] += scale * g[o * inner + i];
                                        }
                                    }
                                }
                            });
                        }
                    }
                }
                Op::Max { x, argmax, .. } => {
                    Self::acc(&mut grads, nodes, *x, |s| {
                        for (gv, &src) in g.iter().zip(argmax) {
                            s[src] += gv;
                        }
                    });
                }
                Op::MaxPool2 { x, argmax } => {
                    Self::acc(&mut grads, nodes, *x, |s| {
                        for (gv, &src) in g.iter().zip(argmax) {
                            s[src] += gv;
                        }
                    });
                }
                Op::Reshape(x) => {
                    Self::acc(&mut grads, nodes, *x, |s| {
                        s.iter_mut().zip(&g).for_each(|(d, v)| *d += v)
                    });
                }
                Op::Upsample { x, factor } => {
                    let f = *factor;
                    let (shape, os) = (nodes[*x].value.shape(), out.shape());
                    let (h, w, oh, ow) = (shape[2], shape[3], os[2], os[3]);
                    Self::acc(&mut grads, nodes, *x, |s| {
                        for p in 0..shape[0] * shape[1] {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    s[(p * h + y / f) * w + xx / f] += g[(p * oh + y) * ow + xx];
                                }
                            }
                        }
                    });
                }
                Op::GlobalAvgPool(x) => {
                    let shape = nodes[*x].value.shape();
                    let hw = shape[2] * shape[3];
                    Self::acc(&mut grads, nodes, *x, |s| {
                        for (p, chunk) in s.chunks_exact_mut(hw).enumerate() {
                            let gv = g[p] / hw as f64;
                            chunk.iter_mut().for_each(|d| *d += gv);
                        }
                    });
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = split_axis(out.shape(), *axis);
                    let mut offset = 0;
                    for &x in xs {
                        let len = nodes[x].value.shape()[*axis];
                        Self::acc(&mut grads, nodes, x, |s| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                for (d, v) in s[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        });
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let full = nodes[*x].value.shape()[*axis];
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    Self::acc(&mut grads, nodes, *x, |s| {
                        for o in 0..outer {
                            let dst = &mut s[(o * full + start) * inner..(o * full + start + len) * inner];
                            for (d, v) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, geom } => {
                    let (x, w) = (*x, *w);
                    let (gx, gw) = conv::conv2d_backward(
                        geom,
                        nodes[x].value.data(),
                        nodes[w].value.data(),
                        &g,
                        nodes[x].requires_grad,
                        nodes[w].requires_grad,
                    );
                    if let Some(gx) = gx {
                        Self::acc(&mut grads, nodes, x, |s| {
                            s.iter_mut().zip(&gx).for_each(|(d, v)| *d += v)
                        });
                    }
                    if let Some(gw) = gw {
                        Self::acc(&mut grads, nodes, w, |s| {
                            s.iter_mut().zip(&gw).for_each(|(d, v)| *d += v)
                        });
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn pointwise_back(
        grads: &mut [Option<Vec<f64>>],
        nodes: &[Node],
        x: usize,
        y: &[f64],
        g: &[f64],
        dydx: impl Fn(f64, f64) -> f64,
    ) {
        let xv = nodes[x].value.data();
        Self::acc(grads, nodes, x, |s| {
            for (((d, gv), &xi), &yi) in s.iter_mut().zip(g).zip(xv).zip(y) {
                *d += gv * dydx(xi, yi);
            }
        });
    }

    /// Accumulates `f(out_idx, in_idx, g)` into input `x`, summing over broadcast axes.
    fn reduce_into(
        grads: &mut [Option<Vec<f64>>],
        nodes: &[Node],
        x: usize,
        out_shape: &[usize],
        g: &[f64],
        f: impl Fn(usize, usize, f64) -> f64,
    ) {
        let in_shape = nodes[x].value.shape().to_vec();
        Self::acc(grads, nodes, x, |s| {
            if in_shape == out_shape {
                for (i, (d, gv)) in s.iter_mut().zip(g).enumerate() {
                    *d += f(i, i, *gv);
                }
            } else {
                let st = broadcast_strides(&in_shape, out_shape);
                for_each_broadcast(out_shape, &st, &st, |o, i, _| s[i] += f(o, i, g[o]));
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_back(
        grads: &mut [Option<Vec<f64>>],
        nodes: &[Node],
        a: usize,
        b: usize,
        out_shape: &[usize],
        g: &[f64],
        f: impl Fn(usize, usize, f64) -> (f64, f64),
    ) {
        let (sa, sb) = (nodes[a].value.shape().to_vec(), nodes[b].value.shape().to_vec());
        let (ta, tb) = (broadcast_strides(&sa, out_shape), broadcast_strides(&sb, out_shape));
        let na = nodes[a].value.numel();
        let nb = nodes[b].value.numel();
        let mut ga = vec![0.0; na];
        let mut gb = vec![0.0; nb];
        if sa == out_shape && sb == out_shape {
            for i in 0..g.len() {
                let (da, db) = f(i, i, g[i]);
                ga[i] += da;
                gb[i] += db;
            }
        } else {
            for_each_broadcast(out_shape, &ta, &tb, |o, ia, ib| {
                let (da, db) = f(ia, ib, g[o]);
                ga[ia] += da;
                gb[ib] += db;
            });
        }
        Self::acc(grads, nodes, a, |s| s.iter_mut().zip(&ga).for_each(|(d, v)| *d += v));
        Self::acc(grads, nodes, b, |s| s.iter_mut().zip(&gb).for_each(|(d, v)| *d += v));
    }
}
