//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in execution
//! order; [`Tape::backward`] walks that record once in reverse. Tapes are
//! single-threaded (`!Send`); parallel work uses one tape per task.

mod gradcheck;
pub(crate) mod kernels;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub use kernels::{ConvSpec, PadMode, RowMix};

use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sin(usize),
    Exp(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Recip(usize),
    LayerNorm { x: usize, rstd: Rc<Vec<T>> },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    ConvTranspose2d { x: usize, w: usize, geom: ConvGeom },
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    CosineSim { a: usize, b: usize },
    Mix { x: usize, mix: Arc<RowMix> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one differentiable computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not influence it.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name.to_string(),
            });
        }
        let rg = inputs.iter().any(|&i| self.requires(i));
        Ok(self.push(value, op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contribs = backprop(&nodes, id, &g);
            grads[id] = Some(g);
            for (input, gi) in contribs {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Input-gradient contributions of node `id` given its output gradient `g`.
fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let node = &nodes[id];
    let out = node.value.data();
    let val = |i: usize| &nodes[i].value;
    let ew = |a: usize, f: &dyn Fn(T, T, T) -> T| -> Vec<(usize, Vec<T>)> {
        let x = val(a).data();
        vec![(a, x.iter().zip(out).zip(g).map(|((&x, &y), &g)| f(x, y, g)).collect())]
    };
    match &node.op {
        Op::Leaf => Vec::new(),
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            let os = node.value.shape();
            let ga = kernels::reduce_to(g, os, val(a).shape());
            let gb: Vec<T> = kernels::reduce_to(g, os, val(b).shape()).into_iter().map(|v| v * sign).collect();
            vec![(a, ga), (b, gb)]
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let os = node.value.shape();
            let ga_full = kernels::broadcast_map(os, (g, os), (vb.data(), vb.shape()), |g, y| g * y);
            let gb_full = kernels::broadcast_map(os, (g, os), (va.data(), va.shape()), |g, x| g * x);
            vec![
                (a, kernels::reduce_to(&ga_full, os, va.shape())),
                (b, kernels::reduce_to(&gb_full, os, vb.shape())),
            ]
        }
        &Op::Scale(a, c) => ew(a, &|_, _, g| g * c),
        &Op::AddScalar(a) | &Op::Reshape(a) => vec![(a, g.to_vec())],
        &Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            vec![
                (a, kernels::matmul_nt(g, vb.data(), m, k, n)),
                (b, kernels::matmul_tn(va.data(), g, m, k, n)),
            ]
        }
        &Op::Transpose(a) => {
            let s = val(a).shape().to_vec();
            let (r, c) = (s[0], s[1]);
            // g is [c, r]
            let mut ga = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            vec![(a, ga)]
        }
        &Op::Sin(a) => ew(a, &|x, _, g| g * x.cos()),
        &Op::Exp(a) => ew(a, &|_, y, g| g * y),
        &Op::Tanh(a) => ew(a, &|_, y, g| g * (T::one() - y * y)),
        &Op::Sigmoid(a) => ew(a, &|_, y, g| g * y * (T::one() - y)),
        &Op::Relu(a) => ew(a, &|x, _, g| if x > T::zero() { g } else { T::zero() }),
        &Op::Recip(a) => ew(a, &|_, y, g| -g * y * y),
        Op::LayerNorm { x, rstd } => {
            let c = *node.value.shape().last().unwrap_or(&1);
            let ct = T::of(c as f64);
            let mut gx = vec![T::zero(); g.len()];
            for (r, &rs) in rstd.iter().enumerate() {
                let y = &out[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let mean_g = gr.iter().copied().sum::<T>() / ct;
                let mean_gy = gr.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / ct;
                for j in 0..c {
                    gx[r * c + j] = rs * (gr[j] - mean_g - y[j] * mean_gy);
                }
            }
            vec![(*x, gx)]
        }
        Op::Conv2d { x, w, geom } => {
            let (dx, dw) = geom.conv_backward(val(*x).data(), val(*w).data(), g);
            vec![(*x, dx), (*w, dw)]
        }
        Op::ConvTranspose2d { x, w, geom } => {
            let (dx, dw) = geom.transpose_backward(val(*x).data(), val(*w).data(), g);
            vec![(*x, dx), (*w, dw)]
        }
        &Op::Sum(a) => vec![(a, vec![g[0]; val(a).len()])],
        &Op::Mean(a) => {
            let n = val(a).len();
            vec![(a, vec![g[0] / T::of(n as f64); n])]
        }
        &Op::SumAxis { x, axis } => {
            let s = val(x).shape().to_vec();
            let (outer, len, inner) = split_axis(&s, axis);
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![(x, gx)]
        }
        Op::Concat { parts, axis } => {
            let os = node.value.shape().to_vec();
            let (outer, total, inner) = split_axis(&os, *axis);
            let mut off = 0;
            let mut res = Vec::with_capacity(parts.len());
            for &p in parts {
                let len = val(p).shape()[*axis];
                let mut gp = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let start = (o * total + off) * inner;
                    gp.extend_from_slice(&g[start..start + len * inner]);
                }
                off += len;
                res.push((p, gp));
            }
            res
        }
        &Op::CosineSim { a, b } => {
            let (va, vb) = (val(a), val(b));
            let c = *va.shape().last().unwrap_or(&1);
            let rows = va.len() / c;
            let mut ga = vec![T::zero(); va.len()];
            let mut gb = vec![T::zero(); vb.len()];
            for r in 0..rows {
                let x = &va.data()[r * c..(r + 1) * c];
                let y = &vb.data()[r * c..(r + 1) * c];
                let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
                if nx == T::zero() || ny == T::zero() {
                    continue;
                }
                let s = out[r];
                let inv = T::one() / (nx * ny);
                for j in 0..c {
                    ga[r * c + j] = g[r] * (y[j] * inv - s * x[j] / (nx * nx));
                    gb[r * c + j] = g[r] * (x[j] * inv - s * y[j] / (ny * ny));
                }
            }
            vec![(a, ga), (b, gb)]
        }
        Op::Mix { x, mix } => {
            let width = *val(*x).shape().last().unwrap_or(&1);
            vec![(*x, mix.apply_transpose(g, width))]
        }
    }
}

/// `(outer, axis length, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    /// Owned copy of the current value.
    pub fn tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(&self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var<'t, T>> {
        let v = self.value().map(f);
        self.tape.record(name, v, op, &[self.id])
    }

    fn binary(&self, other: &Var<'t, T>, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let shape = kernels::broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
        let data = kernels::broadcast_map(&shape, (a.data(), a.shape()), (b.data(), b.shape()), f);
        self.tape
            .record(name, Tensor::new(shape, data)?, op, &[self.id, other.id])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        self.unary("scale", Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        self.unary("add_scalar", Op::AddScalar(self.id), |x| x + c)
    }

    /// `self + alpha · other`, the update used by the ODE integrators.
    pub fn axpy(&self, alpha: f64, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.add(&other.scale(alpha)?)
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        self.tape.record(
            "matmul",
            Tensor::new([m, n], data)?,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// `self · w + b` for `self: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&self, w: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(w)?.add(b)
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", a.shape())));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        self.tape
            .record("transpose", Tensor::new([c, r], data)?, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = self.tensor().reshape(shape)?;
        self.tape.record("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    pub fn sin(&self) -> Result<Var<'t, T>> {
        self.unary("sin", Op::Sin(self.id), T::sin)
    }

    pub fn exp(&self) -> Result<Var<'t, T>> {
        self.unary("exp", Op::Exp(self.id), T::exp)
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.unary("tanh", Op::Tanh(self.id), T::tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |x| T::one() / (T::one() + (-x).exp()))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(T::zero()))
    }

    /// Elementwise `1/x`; zero entries produce a non-finite error.
    pub fn recip(&self) -> Result<Var<'t, T>> {
        self.unary("recip", Op::Recip(self.id), |x| T::one() / x)
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    /// Normalizes each row over the last axis (no affine; eps = 1e-5).
    pub fn layer_norm(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let rows = x.len() / c.max(1);
        let ct = T::of(c as f64);
        let mut data = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / ct;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ct;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            for j in 0..c {
                data[r * c + j] = (row[j] - mean) * rs;
            }
            rstd.push(rs);
        }
        let op = Op::LayerNorm {
            x: self.id,
            rstd: Rc::new(rstd),
        };
        self.tape
            .record("layer_norm", Tensor::new(x.shape().to_vec(), data)?, op, &[self.id])
    }

    /// 2-D (grouped) convolution over a channels-last `[H, W, Cin]` input with
    /// weight `[KH, KW, Cin/groups, Cout]`.
    pub fn conv2d(&self, w: &Var<'t, T>, spec: ConvSpec) -> Result<Var<'t, T>> {
        self.same_tape(w);
        let (x, wv) = (self.value(), w.value());
        let geom = ConvGeom::conv(x.shape(), wv.shape(), spec)?;
        let data = geom.conv_forward(x.data(), wv.data());
        self.tape.record(
            "conv2d",
            Tensor::new([geom.ho, geom.wo, geom.cout], data)?,
            Op::Conv2d { x: self.id, w: w.id, geom },
            &[self.id, w.id],
        )
    }

    /// Transposed 2-D convolution with weight `[KH, KW, Cin, Cout]`.
    pub fn conv_transpose2d(&self, w: &Var<'t, T>, spec: ConvSpec) -> Result<Var<'t, T>> {
        self.same_tape(w);
        let (x, wv) = (self.value(), w.value());
        let geom = ConvGeom::conv_transpose(x.shape(), wv.shape(), spec)?;
        let data = geom.transpose_forward(x.data(), wv.data());
        self.tape.record(
            "conv_transpose2d",
            Tensor::new([geom.ho, geom.wo, geom.cout], data)?,
            Op::ConvTranspose2d { x: self.id, w: w.id, geom },
            &[self.id, w.id],
        )
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.record("sum", v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(x.sum() / T::of(x.len() as f64));
        self.tape.record("mean", v, Op::Mean(self.id), &[self.id])
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        self.tape
            .record("sum_axis", Tensor::new(shape, data)?, Op::SumAxis { x: self.id, axis }, &[self.id])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat { parts: ids.clone(), axis },
            &ids,
        )
    }

    /// Row-wise cosine similarity over the last axis, output `[..., 1]`.
    /// Rows where either vector has zero norm give 0.
    pub fn cosine_similarity(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() || a.rank() == 0 {
            return Err(Error::shape("cosine_similarity", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let c = *a.shape().last().unwrap();
        let rows = a.len() / c.max(1);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &a.data()[r * c..(r + 1) * c];
            let y = &b.data()[r * c..(r + 1) * c];
            let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
            let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
            let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
            data.push(if nx == T::zero() || ny == T::zero() { T::zero() } else { dot / (nx * ny) });
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        self.tape.record(
            "cosine_similarity",
            Tensor::new(shape, data)?,
            Op::CosineSim { a: self.id, b: other.id },
            &[self.id, other.id],
        )
    }

    /// Applies a fixed sparse row operator to a `[rows, width]` input.
    pub fn mix_rows(&self, mix: &Arc<RowMix>) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != mix.cols() {
            return Err(Error::shape(
                "mix_rows",
                format!("input {:?} vs operator with {} columns", x.shape(), mix.cols()),
            ));
        }
        let width = x.shape()[1];
        let data = mix.apply(x.data(), width);
        self.tape.record(
            "mix_rows",
            Tensor::new([mix.rows(), width], data)?,
            Op::Mix { x: self.id, mix: Arc::clone(mix) },
            &[self.id],
        )
    }
}

#[cfg(test)]
mod tests;
