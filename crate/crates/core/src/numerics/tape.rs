//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that requires
//! one. Nodes built only from constants are never visited.
//!
//! ```
//! use lssdm::numerics::{Array, Tape};
//!
//! let tape = Tape::new();
//! let p = tape.leaf(Array::new(&[2], vec![1.0, -3.0]).unwrap(), true);
//! let loss = p.square().unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[2.0, -6.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use super::array::gemm;
use super::Array;
use crate::error::{Error, Result};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MulConst(usize, Rc<Array>),
    AddBias(usize, usize),
    ScaleLast(usize, usize),
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Square(usize),
    Softmax(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Sum(usize),
    ConcatLast(Vec<usize>),
    SliceLast { x: usize, start: usize },
    GatherRows { x: usize, idx: Rc<Vec<usize>> },
    Conv1d { x: usize, w: usize, b: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias(a, b) | Op::ScaleLast(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _) | Op::Shift(a) | Op::MulConst(a, _) | Op::Reshape(a) => vec![*a],
            Op::Permute(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::Tanh(a) => vec![*a],
            Op::Exp(a) | Op::Square(a) | Op::Softmax(a) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, .. } | Op::SliceLast { x, .. } | Op::GatherRows { x, .. } => vec![*x],
            Op::ConcatLast(parts) => parts.clone(),
            Op::Conv1d { x, w, b } => vec![*x, *w, *b],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::AddBias(..) => "add_bias",
            Op::ScaleLast(..) => "scale_last",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::ConcatLast(..) => "concat",
            Op::SliceLast { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::Conv1d { .. } => "conv1d",
        }
    }
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Operation record. Not `Sync`; use one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients indexed by node, as returned from [`Tape::backward`].
pub struct TapeGrads {
    grads: Vec<Option<Array>>,
}

impl TapeGrads {
    pub fn get(&self, v: Var<'_>) -> Option<&Array> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Array> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
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

    /// Drops every node after the first `len`. Vars created before the cut
    /// stay valid; later ones must not be used again.
    pub fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool, label: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            label,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// New input node. `requires_grad = false` makes it a constant.
    pub fn leaf(&self, value: Array, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad, None)
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Leaf carrying a parameter path, used in non-finite diagnostics.
    pub fn named_leaf(&self, path: &str, value: Array, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad, Some(path.to_string()))
    }

    fn value(&self, id: usize) -> Rc<Array> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn derived(&self, value: Array, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = inputs.iter().any(|&i| self.requires(i));
        self.push(value, op, rg, None)
    }

    /// Describes the first node holding a non-finite value.
    fn first_non_finite(&self) -> Option<String> {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| match &n.label {
                Some(l) => format!("parameter `{l}`"),
                None => {
                    let near = upstream_params(&nodes, i);
                    let via = if near.is_empty() {
                        String::new()
                    } else {
                        format!(" downstream of `{}`", near.join("`, `"))
                    };
                    format!("node {i} ({}){via}", n.op.name())
                }
            })
        })
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Result<TapeGrads> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            drop(nodes);
            let location = self.first_non_finite().unwrap_or_else(|| "loss".to_string());
            return Err(Error::NonFinite { location });
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Array::full(lv.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(TapeGrads { grads })
    }
}

/// Labelled leaves that `id` depends on, in node order.
fn upstream_params(nodes: &[Node], id: usize) -> Vec<String> {
    let mut seen = vec![false; id + 1];
    let mut stack = vec![id];
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        stack.extend(nodes[i].op.inputs());
    }
    seen.iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .filter_map(|(i, _)| nodes[i].label.clone())
        .collect()
}

fn accumulate(grads: &mut [Option<Array>], nodes: &[Node], id: usize, g: Array) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Array {
    Array::new(shape, data).expect("shape preserved by construction")
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
    let val = |i: usize| &*nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let out = &*node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(grads, nodes, *a, g.mul(val(*b))?);
            }
            if wants(*b) {
                accumulate(grads, nodes, *b, g.mul(val(*a))?);
            }
        }
        Op::Scale(a, k) => accumulate(grads, nodes, *a, g.scale(*k)),
        Op::Shift(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::MulConst(a, c) => accumulate(grads, nodes, *a, g.mul(c)?),
        Op::AddBias(x, b) => {
            accumulate(grads, nodes, *x, g.clone());
            if wants(*b) {
                let c = last_dim(g.shape());
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accumulate(grads, nodes, *b, with_shape(val(*b).shape(), gb));
            }
        }
        Op::ScaleLast(x, s) => {
            let sv = val(*s).data();
            let c = sv.len();
            if wants(*x) {
                let mut gx = g.data().to_vec();
                for row in gx.chunks_mut(c) {
                    for (v, k) in row.iter_mut().zip(sv) {
                        *v *= k;
                    }
                }
                accumulate(grads, nodes, *x, with_shape(g.shape(), gx));
            }
            if wants(*s) {
                let mut gs = vec![0.0; c];
                for (grow, xrow) in g.data().chunks(c).zip(val(*x).data().chunks(c)) {
                    for ((acc, a), b) in gs.iter_mut().zip(grow).zip(xrow) {
                        *acc += a * b;
                    }
                }
                accumulate(grads, nodes, *s, with_shape(val(*s).shape(), gs));
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                accumulate(grads, nodes, *a, with_shape(av.shape(), ga));
            }
            if wants(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                accumulate(grads, nodes, *b, with_shape(bv.shape(), gb));
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
            if wants(*a) {
                let mut ga = vec![0.0; bt * m * k];
                for t in 0..bt {
                    let gs = &g.data()[t * m * n..(t + 1) * m * n];
                    let bs = &bv.data()[t * k * n..(t + 1) * k * n];
                    let dst = &mut ga[t * m * k..(t + 1) * m * k];
                    // C = A·B  ⇒ dA = dC·Bᵀ;   C = A·Bᵀ ⇒ dA = dC·B
                    gemm(m, n, k, gs, false, bs, !*trans_b, dst, false);
                }
                accumulate(grads, nodes, *a, with_shape(av.shape(), ga));
            }
            if wants(*b) {
                let mut gb = vec![0.0; bt * k * n];
                for t in 0..bt {
                    let gs = &g.data()[t * m * n..(t + 1) * m * n];
                    let as_ = &av.data()[t * m * k..(t + 1) * m * k];
                    let dst = &mut gb[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        // dB (n×k) = dCᵀ·A
                        gemm(n, m, k, gs, true, as_, false, dst, false);
                    } else {
                        // dB (k×n) = Aᵀ·dC
                        gemm(k, m, n, as_, true, gs, false, dst, false);
                    }
                }
                accumulate(grads, nodes, *b, with_shape(bv.shape(), gb));
            }
        }
        Op::Reshape(a) => {
            accumulate(grads, nodes, *a, with_shape(val(*a).shape(), g.data().to_vec()));
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            accumulate(grads, nodes, *a, g.permute(&inverse)?);
        }
        Op::Relu(a) => {
            let gx = g.zip_map(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
            accumulate(grads, nodes, *a, gx);
        }
        Op::Sigmoid(a) => {
            let gx = g.zip_map(out, "sigmoid", |gv, y| gv * y * (1.0 - y))?;
            accumulate(grads, nodes, *a, gx);
        }
        Op::Tanh(a) => {
            let gx = g.zip_map(out, "tanh", |gv, y| gv * (1.0 - y * y))?;
            accumulate(grads, nodes, *a, gx);
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, g.mul(out)?),
        Op::Square(a) => {
            let gx = g.zip_map(val(*a), "square", |gv, x| 2.0 * gv * x)?;
            accumulate(grads, nodes, *a, gx);
        }
        Op::Softmax(a) => {
            let c = last_dim(out.shape());
            let mut gx = Vec::with_capacity(out.len());
            for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                gx.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
            }
            accumulate(grads, nodes, *a, with_shape(out.shape(), gx));
        }
        Op::LayerNorm { x, rstd } => {
            // out = x̂; dx = rstd · (g − mean(g) − x̂·mean(g·x̂))
            let c = last_dim(out.shape());
            let mut gx = Vec::with_capacity(out.len());
            for ((grow, yrow), r) in g.data().chunks(c).zip(out.data().chunks(c)).zip(rstd) {
                let mg = grow.iter().sum::<f64>() / c as f64;
                let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                gx.extend(grow.iter().zip(yrow).map(|(gv, y)| r * (gv - mg - y * mgy)));
            }
            accumulate(grads, nodes, *x, with_shape(out.shape(), gx));
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            accumulate(grads, nodes, *a, Array::full(val(*a).shape(), gv));
        }
        Op::ConcatLast(parts) => {
            let total = last_dim(out.shape());
            let mut start = 0;
            for &p in parts {
                let pv = val(p);
                let w = last_dim(pv.shape());
                if wants(p) {
                    let mut gp = Vec::with_capacity(pv.len());
                    for row in g.data().chunks(total) {
                        gp.extend_from_slice(&row[start..start + w]);
                    }
                    accumulate(grads, nodes, p, with_shape(pv.shape(), gp));
                }
                start += w;
            }
        }
        Op::SliceLast { x, start } => {
            let xv = val(*x);
            let total = last_dim(xv.shape());
            let w = last_dim(out.shape());
            let mut gx = vec![0.0; xv.len()];
            for (dst, src) in gx.chunks_mut(total).zip(g.data().chunks(w)) {
                dst[*start..*start + w].copy_from_slice(src);
            }
            accumulate(grads, nodes, *x, with_shape(xv.shape(), gx));
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let c = last_dim(xv.shape());
            let mut gx = vec![0.0; xv.len()];
            for (&r, src) in idx.iter().zip(g.data().chunks(c)) {
                for (d, s) in gx[r * c..(r + 1) * c].iter_mut().zip(src) {
                    *d += s;
                }
            }
            accumulate(grads, nodes, *x, with_shape(xv.shape(), gx));
        }
        Op::Conv1d { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (bt, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (cout, ksz) = (wv.shape()[0], wv.shape()[2]);
            let pad = ksz / 2;
            let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let mut gb = vec![0.0; cout];
            for n in 0..bt {
                for o in 0..cout {
                    let grow = &gd[(n * cout + o) * len..(n * cout + o + 1) * len];
                    gb[o] += grow.iter().sum::<f64>();
                    for c in 0..cin {
                        let xrow = &xd[(n * cin + c) * len..(n * cin + c + 1) * len];
                        let gxrow = &mut gx[(n * cin + c) * len..(n * cin + c + 1) * len];
                        for k in 0..ksz {
                            let wi = (o * cin + c) * ksz + k;
                            let wk = wd[wi];
                            let mut acc = 0.0;
                            for l in 0..len {
                                let src = l + k;
                                if src < pad || src - pad >= len {
                                    continue;
                                }
                                acc += grow[l] * xrow[src - pad];
                                gxrow[src - pad] += grow[l] * wk;
                            }
                            gw[wi] += acc;
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, with_shape(xv.shape(), gx));
            accumulate(grads, nodes, *w, with_shape(wv.shape(), gw));
            accumulate(grads, nodes, *b, with_shape(val(*b).shape(), gb));
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Same value as a constant: gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn binary(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.tape.derived(v, op, &[self.id, other.id]))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.derived(v, op, &[self.id])
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Scalar-array product; the only implicit broadcast besides [`Var::add_scalar`].
    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |v| v * k)
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.unary(Op::Shift(self.id), |v| v + k)
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&self, c: &Array) -> Result<Var<'t>> {
        let v = self.value().mul(c)?;
        Ok(self
            .tape
            .derived(v, Op::MulConst(self.id, Rc::new(c.clone())), &[self.id]))
    }

    /// `x[..., c] + b[c]`: adds a bias vector along the last axis.
    pub fn add_bias(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&b)?;
        let (xv, bv) = (self.value(), b.value());
        let c = last_dim(xv.shape());
        if bv.len() != c || bv.ndim() != 1 {
            return Err(Error::mismatch("add_bias", xv.shape(), bv.shape()));
        }
        let mut d = xv.data().to_vec();
        for row in d.chunks_mut(c) {
            for (v, k) in row.iter_mut().zip(bv.data()) {
                *v += k;
            }
        }
        Ok(self
            .tape
            .derived(with_shape(xv.shape(), d), Op::AddBias(self.id, b.id), &[self.id, b.id]))
    }

    /// `x[..., c] * s[c]`: per-channel gain along the last axis.
    pub fn scale_last(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let (xv, sv) = (self.value(), s.value());
        let c = last_dim(xv.shape());
        if sv.len() != c || sv.ndim() != 1 {
            return Err(Error::mismatch("scale_last", xv.shape(), sv.shape()));
        }
        let mut d = xv.data().to_vec();
        for row in d.chunks_mut(c) {
            for (v, k) in row.iter_mut().zip(sv.data()) {
                *v *= k;
            }
        }
        Ok(self.tape.derived(
            with_shape(xv.shape(), d),
            Op::ScaleLast(self.id, s.id),
            &[self.id, s.id],
        ))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self
            .tape
            .derived(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Matrix product of the trailing two axes of a rank-≥2 input with a
    /// 2-D weight: `[.., k] · [k, n] → [.., n]`.
    pub fn linear(&self, w: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let k = last_dim(&shape);
        let rows = self.value().len() / k;
        let flat = self.reshape(&[rows, k])?.matmul(w)?;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = flat.shape()[1];
        flat.reshape(&out_shape)
    }

    fn bmm_impl(&self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::mismatch("bmm", sa, sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; bt * m * n];
        for t in 0..bt {
            gemm(
                m,
                k,
                n,
                &av.data()[t * m * k..(t + 1) * m * k],
                false,
                &bv.data()[t * k * n..(t + 1) * k * n],
                trans_b,
                &mut out[t * m * n..(t + 1) * m * n],
                false,
            );
        }
        Ok(self.tape.derived(
            with_shape(&[bt, m, n], out),
            Op::Bmm {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        ))
    }

    /// Batched product `[b, m, k] · [b, k, n]`.
    pub fn bmm(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.bmm_impl(other, false)
    }

    /// Batched product with the second operand transposed:
    /// `[b, m, k] · [b, n, k]ᵀ`.
    pub fn bmm_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.bmm_impl(other, true)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.derived(v, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let v = self.value().permute(axes)?;
        Ok(self.tape.derived(v, Op::Permute(self.id, axes.to_vec()), &[self.id]))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        Ok(self.unary(Op::Square(self.id), |v| v * v))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let xv = self.value();
        let c = last_dim(xv.shape());
        let mut d = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let start = d.len();
            let mut s = 0.0;
            for &v in row {
                let e = (v - m).exp();
                s += e;
                d.push(e);
            }
            for v in &mut d[start..] {
                *v /= s;
            }
        }
        self.tape
            .derived(with_shape(xv.shape(), d), Op::Softmax(self.id), &[self.id])
    }

    /// Normalizes each last-axis row to zero mean and unit variance
    /// (biased variance, `eps` added inside the square root).
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let xv = self.value();
        let c = last_dim(xv.shape());
        let mut d = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / c);
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            d.extend(row.iter().map(|v| (v - mean) * r));
        }
        self.tape.derived(
            with_shape(xv.shape(), d),
            Op::LayerNorm { x: self.id, rstd },
            &[self.id],
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().sum();
        Ok(self.tape.derived(Array::scalar(s), Op::Sum(self.id), &[self.id]))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        Ok(self.sum()?.scale(1.0 / n))
    }

    /// Joins along the last axis; all leading extents must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].ndim() - 1];
        for v in &values {
            if &v.shape()[..v.ndim() - 1] != lead {
                return Err(Error::mismatch("concat", values[0].shape(), v.shape()));
            }
        }
        for p in parts {
            first.same_tape(p)?;
        }
        let widths: Vec<usize> = values.iter().map(|v| last_dim(v.shape())).collect();
        let total: usize = widths.iter().sum();
        let rows = values[0].len() / widths[0];
        let mut d = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                d.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = values[0].shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.derived(with_shape(&shape, d), Op::ConcatLast(ids.clone()), &ids))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let c = last_dim(xv.shape());
        if len == 0 || start + len > c {
            return Err(Error::Contract(format!(
                "slice {start}..{} out of range for last extent {c}",
                start + len
            )));
        }
        let mut d = Vec::with_capacity(xv.len() / c * len);
        for row in xv.data().chunks(c) {
            d.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self
            .tape
            .derived(with_shape(&shape, d), Op::SliceLast { x: self.id, start }, &[self.id]))
    }

    /// Row gather from a 2-D input: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let xv = self.value();
        if xv.ndim() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows needs a 2-D input, found {:?}",
                xv.shape()
            )));
        }
        let (rows, c) = (xv.shape()[0], xv.shape()[1]);
        if idx.is_empty() || idx.iter().any(|&r| r >= rows) {
            return Err(Error::Contract("gather index out of range".into()));
        }
        let mut d = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            d.extend_from_slice(&xv.data()[r * c..(r + 1) * c]);
        }
        Ok(self.tape.derived(
            with_shape(&[idx.len(), c], d),
            Op::GatherRows { x: self.id, idx },
            &[self.id],
        ))
    }

    /// Same-padded 1-D convolution: `x [b, c_in, len]`, `w [c_out, c_in, k]`
    /// with odd `k`, `bias [c_out]` → `[b, c_out, len]`.
    pub fn conv1d(&self, w: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w)?;
        self.same_tape(&bias)?;
        let (xv, wv, bv) = (self.value(), w.value(), bias.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] || ws[2] % 2 == 0 {
            return Err(Error::mismatch("conv1d", xs, ws));
        }
        if bv.shape() != [ws[0]] {
            return Err(Error::mismatch("conv1d bias", ws, bv.shape()));
        }
        let (bt, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, ksz) = (ws[0], ws[2]);
        let pad = ksz / 2;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; bt * cout * len];
        for n in 0..bt {
            for o in 0..cout {
                let orow = &mut out[(n * cout + o) * len..(n * cout + o + 1) * len];
                orow.fill(bv.data()[o]);
                for c in 0..cin {
                    let xrow = &xd[(n * cin + c) * len..(n * cin + c + 1) * len];
                    for k in 0..ksz {
                        let wk = wd[(o * cin + c) * ksz + k];
                        for (l, ov) in orow.iter_mut().enumerate() {
                            let src = l + k;
                            if src >= pad && src - pad < len {
                                *ov += wk * xrow[src - pad];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.tape.derived(
            with_shape(&[bt, cout, len], out),
            Op::Conv1d {
                x: self.id,
                w: w.id,
                b: bias.id,
            },
            &[self.id, w.id, bias.id],
        ))
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
