use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvDims};
use super::{Boundary, Padding, Result, Tensor, TensorError};

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    SquaredNorm(usize),
    Relu(usize),
    Sin(usize),
    Cos(usize),
    Pow(usize, f64),
    Reshape(usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Conv2d {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        pad: Padding,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        shift: Vec<f64>,
        scale: Vec<f64>,
    },
    Laplacian {
        input: usize,
        spacing: f64,
        boundary: Boundary,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Const => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddConst(a) | Sum(a) | Mean(a) | SquaredNorm(a) | Relu(a)
            | Sin(a) | Cos(a) | Pow(a, _) | Reshape(a) => vec![*a],
            Slice { input, .. } | Laplacian { input, .. } => vec![*input],
            Concat { inputs, .. } => inputs.clone(),
            Conv2d { x, weight, bias, .. } => {
                let mut v = vec![*x, *weight];
                v.extend(bias.iter().copied());
                v
            }
            BatchNorm { x, gamma, beta, .. } | BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
    consumed: bool,
}

/// Record of primitive operations for one forward pass.
///
/// A tape supports exactly one [`Tape::backward`]; build a fresh one for each
/// forward evaluation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Grad {
    by_leaf: HashMap<usize, Tensor>,
}

impl Grad {
    /// Gradient for `leaf`; `None` if `leaf` was not registered as a parameter.
    pub fn get(&self, leaf: Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&leaf.id)
    }

    pub fn wrt(&self, leaf: Var<'_>) -> Tensor {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&leaf.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let var = self.push(value, Op::Leaf);
        self.inner.borrow_mut().leaves.push(var.id);
        var
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => true,
            _ => op.inputs().iter().any(|&i| inner.nodes[i].requires_grad),
        };
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grad> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(TensorError::TapeConsumed);
            }
            let v = &inner.nodes[loss.id].value;
            if !v.is_scalar() {
                return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
            }
            inner.consumed = true;
        }
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop_node(nodes, node, &g, &mut grads);
        }

        let by_leaf = inner
            .leaves
            .iter()
            .map(|&id| {
                let shape = nodes[id].value.shape().to_vec();
                let t = match grads.get_mut(id).and_then(Option::take) {
                    Some(g) => Tensor::new(shape, g).expect("leaf gradient shape"),
                    None => Tensor::zeros(&shape),
                };
                (id, t)
            })
            .collect();
        Ok(Grad { by_leaf })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Sums a gradient of the broadcast (lhs) shape back onto an `n`-entry rhs.
fn reduce_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let need = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::Add(a, b) => {
            if need(*a) {
                accumulate(nodes, grads, *a, g.to_vec());
            }
            if need(*b) {
                accumulate(nodes, grads, *b, reduce_broadcast(g, val(*b).numel()));
            }
        }
        Op::Sub(a, b) => {
            if need(*a) {
                accumulate(nodes, grads, *a, g.to_vec());
            }
            if need(*b) {
                let mut r = reduce_broadcast(g, val(*b).numel());
                r.iter_mut().for_each(|v| *v = -*v);
                accumulate(nodes, grads, *b, r);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let nb = bv.len();
            if need(*a) {
                let ga = g.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect();
                accumulate(nodes, grads, *a, ga);
            }
            if need(*b) {
                let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                accumulate(nodes, grads, *b, reduce_broadcast(&prod, nb));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let nb = bv.len();
            if need(*a) {
                let ga = g.iter().enumerate().map(|(i, gi)| gi / bv[i % nb]).collect();
                accumulate(nodes, grads, *a, ga);
            }
            if need(*b) {
                let prod: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let d = bv[i % nb];
                        -gi * av[i] / (d * d)
                    })
                    .collect();
                accumulate(nodes, grads, *b, reduce_broadcast(&prod, nb));
            }
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, g.iter().map(|v| -v).collect()),
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|v| v * c).collect()),
        Op::AddConst(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k) = (at.shape()[0], at.shape()[1]);
            let n = bt.shape()[1];
            if need(*a) {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, bt.data(), true, 0.0, &mut ga);
                accumulate(nodes, grads, *a, ga);
            }
            if need(*b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, at.data(), true, g, false, 0.0, &mut gb);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).numel()]),
        Op::Mean(a) => {
            let n = val(*a).numel();
            accumulate(nodes, grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::SquaredNorm(a) => {
            let ga = val(*a).data().iter().map(|v| 2.0 * v * g[0]).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Relu(a) => {
            let ga = val(*a)
                .data()
                .iter()
                .zip(g)
                .map(|(x, gi)| if *x > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sin(a) => {
            let ga = val(*a).data().iter().zip(g).map(|(x, gi)| gi * x.cos()).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Cos(a) => {
            let ga = val(*a).data().iter().zip(g).map(|(x, gi)| -gi * x.sin()).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Pow(a, p) => {
            let ga = val(*a)
                .data()
                .iter()
                .zip(g)
                .map(|(x, gi)| gi * p * pow(*x, p - 1.0))
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Slice { input, axis, start } => {
            let in_shape = val(*input).shape();
            let out_len = node.value.shape()[*axis];
            let (outer, inner) = axis_split(in_shape, *axis);
            let full = in_shape[*axis];
            let mut ga = vec![0.0; val(*input).numel()];
            for o in 0..outer {
                let src = &g[o * out_len * inner..(o + 1) * out_len * inner];
                let off = (o * full + start) * inner;
                ga[off..off + out_len * inner].copy_from_slice(src);
            }
            accumulate(nodes, grads, *input, ga);
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let (outer, inner) = axis_split(out_shape, *axis);
            let total = out_shape[*axis];
            let mut offset = 0;
            for &i in inputs {
                let len = val(i).shape()[*axis];
                if need(i) {
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[s..s + len * inner]);
                    }
                    accumulate(nodes, grads, i, gi);
                }
                offset += len;
            }
        }
        Op::Conv2d {
            x,
            weight,
            bias,
            pad,
        } => {
            let (xt, wt) = (val(*x), val(*weight));
            let dims = conv_dims(xt.shape(), wt.shape());
            let (gx, gw, gb) = kernels::conv2d_backward(g, xt.data(), wt.data(), &dims, *pad);
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *weight, gw);
            if let Some(b) = bias {
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let xt = val(*x);
            let (batch, ch, s) = bn_dims(xt.shape());
            let gam = val(*gamma).data();
            let n = (batch * s) as f64;
            let xd = xt.data();
            let mut gx = vec![0.0; xd.len()];
            let mut d_gamma = vec![0.0; ch];
            let mut d_beta = vec![0.0; ch];
            for c in 0..ch {
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for b in 0..batch {
                    let r = (b * ch + c) * s..(b * ch + c + 1) * s;
                    for (gi, xi) in g[r.clone()].iter().zip(&xd[r]) {
                        let xhat = (xi - mean[c]) * inv_std[c];
                        sum_g += gi;
                        sum_gx += gi * xhat;
                    }
                }
                d_gamma[c] = sum_gx;
                d_beta[c] = sum_g;
                let k = gam[c] * inv_std[c] / n;
                for b in 0..batch {
                    let r = (b * ch + c) * s..(b * ch + c + 1) * s;
                    for ((o, gi), xi) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xd[r]) {
                        let xhat = (xi - mean[c]) * inv_std[c];
                        *o = k * (n * gi - sum_g - xhat * sum_gx);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *gamma, d_gamma);
            accumulate(nodes, grads, *beta, d_beta);
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            shift,
            scale,
        } => {
            let xt = val(*x);
            let (batch, ch, s) = bn_dims(xt.shape());
            let gam = val(*gamma).data();
            let xd = xt.data();
            let mut gx = vec![0.0; xd.len()];
            let mut d_gamma = vec![0.0; ch];
            let mut d_beta = vec![0.0; ch];
            for b in 0..batch {
                for c in 0..ch {
                    let r = (b * ch + c) * s..(b * ch + c + 1) * s;
                    for ((o, gi), xi) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xd[r]) {
                        *o = gi * gam[c] * scale[c];
                        d_gamma[c] += gi * (xi - shift[c]) * scale[c];
                        d_beta[c] += gi;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *gamma, d_gamma);
            accumulate(nodes, grads, *beta, d_beta);
        }
        Op::Laplacian {
            input,
            spacing,
            boundary,
        } => {
            let shape = val(*input).shape();
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            accumulate(
                nodes,
                grads,
                *input,
                kernels::laplacian(g, h, w, *spacing, *boundary),
            );
        }
    }
}

fn pow(x: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> ConvDims {
    ConvDims {
        batch: x[0],
        c_in: x[1],
        c_out: w[0],
        h: x[2],
        w: x[3],
        k: w[2],
    }
}

fn bn_dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Checks that `rhs` can be broadcast onto `lhs` along leading batch axes.
fn check_broadcast(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<()> {
    let (l, r) = (lhs.shape(), rhs.shape());
    let suffix = r.len() <= l.len() && l[l.len() - r.len()..] == *r;
    if l == r || suffix || rhs.numel() == 1 {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: l.to_vec(),
            rhs: r.to_vec(),
        })
    }
}

fn zip_broadcast(lhs: &Tensor, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let r = rhs.data();
    let n = r.len();
    let data = lhs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| f(a, r[i % n]))
        .collect();
    Tensor::new(lhs.shape().to_vec(), data).expect("broadcast preserves lhs shape")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, op)
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        check_broadcast(name, &a, &b)?;
        let out = zip_broadcast(&a, &b, f);
        Ok(self.tape.push(out, op))
    }

    /// Elementwise sum; `rhs` may broadcast along leading axes or be a scalar.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        if let Some(index) = rhs.value().data().iter().position(|&v| v == 0.0) {
            return Err(TensorError::ZeroDivision { op: "div", index });
        }
        self.binary(rhs, "div", Op::Div(self.id, rhs.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), |v| v + c)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.push(t, Op::MatMul(self.id, rhs.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Sum of squared entries.
    pub fn squared_norm(self) -> Var<'t> {
        let s = self.value().squared_norm();
        self.tape.push(Tensor::scalar(s), Op::SquaredNorm(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(self, p: f64) -> Var<'t> {
        self.unary(Op::Pow(self.id, p), |v| pow(v, p))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.tape.push(t, Op::Reshape(self.id)))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, inner) = axis_split(shape, axis);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.tape.push(
            t,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Joins `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let same_rank = s.len() == base.len();
            let compatible = same_rank
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = axis_split(base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(tape.push(
            t,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Stride-1, same-size 2-D convolution of `[B, Ci, H, W]` with `[Co, Ci, K, K]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, pad: Padding) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(mismatch());
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(TensorError::invalid("conv2d", "kernel size must be odd"));
        }
        if xs[2] < k || xs[3] < k {
            return Err(TensorError::invalid(
                "conv2d",
                format!("spatial size {:?} smaller than kernel {k}", &xs[2..]),
            ));
        }
        let bias_val = bias.map(|b| b.value());
        if let Some(b) = &bias_val {
            if b.shape() != [ws[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![ws[0]],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let dims = conv_dims(xs, ws);
        let out = kernels::conv2d_forward(
            x.data(),
            w.data(),
            bias_val.as_ref().map(|b| b.data()),
            &dims,
            pad,
        );
        let t = Tensor::new(vec![xs[0], ws[0], xs[2], xs[3]], out)?;
        Ok(self.tape.push(
            t,
            Op::Conv2d {
                x: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                pad,
            },
        ))
    }

    fn check_bn(self, gamma: Var<'t>, beta: Var<'t>) -> Result<(usize, usize, usize)> {
        let xs = self.shape();
        if xs.len() < 2 {
            return Err(TensorError::invalid("batch_norm", "input needs [B, C, ...]"));
        }
        let ch = xs[1];
        for p in [gamma, beta] {
            if p.shape() != [ch] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: vec![ch],
                    rhs: p.shape(),
                });
            }
        }
        Ok(bn_dims(&xs))
    }

    /// Training-mode batch normalisation over all axes except the channel axis 1.
    pub fn batch_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, BatchStats)> {
        let (batch, ch, s) = self.check_bn(gamma, beta)?;
        if batch < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                "training mode needs a batch of at least 2",
            ));
        }
        let x = self.value();
        let (mean, var) = kernels::channel_stats(x.data(), batch, ch, s);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = kernels::channel_affine(
            x.data(),
            batch,
            ch,
            s,
            &mean,
            &inv_std,
            gamma.value().data(),
            beta.value().data(),
        );
        let n = (batch * s) as f64;
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * n / (n - 1.0)).collect(),
        };
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let var = self.tape.push(
            t,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                inv_std,
            },
        );
        Ok((var, stats))
    }

    /// Evaluation-mode batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        let (batch, ch, s) = self.check_bn(gamma, beta)?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(TensorError::invalid(
                "batch_norm_eval",
                "running statistics do not match channel count",
            ));
        }
        let scale: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let x = self.value();
        let out = kernels::channel_affine(
            x.data(),
            batch,
            ch,
            s,
            running_mean,
            &scale,
            gamma.value().data(),
            beta.value().data(),
        );
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push(
            t,
            Op::BatchNormEval {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                shift: running_mean.to_vec(),
                scale,
            },
        ))
    }

    /// Five-point Laplacian over the two trailing axes.
    pub fn laplacian(self, spacing: f64, boundary: Boundary) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 2] < 3 || s[s.len() - 1] < 3 {
            return Err(TensorError::invalid(
                "laplacian",
                format!("need trailing grid of at least 3x3, got {s:?}"),
            ));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let out = kernels::laplacian(x.data(), h, w, spacing, boundary);
        let t = Tensor::new(s.to_vec(), out)?;
        Ok(self.tape.push(
            t,
            Op::Laplacian {
                input: self.id,
                spacing,
                boundary,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_is_componentwise() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let tape = Tape::new();
        let a = t(&[3, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, 5.0, -6.0, 7.0, 8.25]);
        let i = tape.constant(Tensor::eye(3));
        let av = tape.constant(a.clone());
        assert_eq!(*i.matmul(av).unwrap().value(), a);
    }

    #[test]
    fn relu_clamps_negatives() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = a.add(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![2]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn div_rejects_exact_zero_denominator() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let b = tape.constant(Tensor::from_vec(vec![2.0, 0.0]));
        assert!(matches!(a.div(b), Err(TensorError::ZeroDivision { index: 1, .. })));
    }

    #[test]
    fn grad_of_squared_norm() {
        let tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![1.0, -2.0]));
        let loss = w.squared_norm();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[2.0, -4.0]);
    }

    #[test]
    fn relu_subgradient_is_zero_on_negatives() {
        let tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![-1.0, 3.0]));
        let loss = w.relu().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![0.0]));
        let g = tape.backward(w.relu().sum()).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
        let loss = w.sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let a = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.param(Tensor::zeros(&[3]));
        let g = tape.backward(a.sum()).unwrap();
        assert_eq!(g.wrt(b).data(), &[0.0; 3]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn broadcast_bias_gradient_sums_over_batch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.param(Tensor::from_vec(vec![0.5, -1.0]));
        let g = tape.backward(x.add(b).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 2).unwrap();
        assert_eq!(a.value().data(), &[1.0, 4.0]);
        let y = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(*y.value(), *x.value());
        let g = tape.backward(y.scale(2.0).sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0; 6]);
    }

    #[test]
    fn delta_kernel_conv_is_identity() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..2 * 16).map(|i| i as f64 * 0.1 - 1.0).collect();
        let x = tape.constant(t(&[2, 1, 4, 4], &data));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        for pad in [Padding::Zero, Padding::Reflect] {
            let y = x.conv2d(w, None, pad).unwrap();
            assert_eq!(y.value().data(), &data[..]);
        }
    }

    #[test]
    fn batch_norm_training_needs_two_samples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(x.batch_norm(g, b, 1e-5).is_err());
    }

    #[test]
    fn batch_norm_maps_constant_field_to_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 3, 3], 0.7));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = x.batch_norm(g, b, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-12));
        assert!((stats.mean[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn laplacian_of_constant_vanishes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 3.0));
        for bc in [Boundary::Neumann, Boundary::Periodic] {
            let y = x.laplacian(0.1, bc).unwrap();
            assert!(y.value().data().iter().all(|v| *v == 0.0));
        }
    }
}
