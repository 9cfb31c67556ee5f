//! Wengert-style tape: every operation appends a node holding its value and
//! enough bookkeeping to produce vector-Jacobian products in reverse order.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, Conv2dGeometry, ConvDims, Padding};
use super::{strides_of, Tensor, STD_EPSILON};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Sqrt,
    Square,
    Recip,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// dy/dx expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
    /// Population standard deviation with [`STD_EPSILON`] under the root.
    Std,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBcast(usize, usize, Rc<Vec<usize>>),
    MulBcast(usize, usize, Rc<Vec<usize>>),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    /// Sum into a keep-dims output; `map[i]` is the output slot of input `i`.
    SumTo(usize, Rc<Vec<usize>>),
    BroadcastTo(usize, Rc<Vec<usize>>),
    MaxAxis(usize, Vec<usize>),
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis_lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: usize,
        start: usize,
        len: usize,
        axis_len: usize,
        outer: usize,
        inner: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        b: Option<usize>,
        geo: Conv2dGeometry,
        dims: ConvDims,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Softmax(usize, Rc<Vec<usize>>),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
    AngularMargin {
        cos: usize,
        targets: Vec<usize>,
        margin: f64,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Records differentiable computation. Dropping the tape drops the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.value().shape())
    }
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A differentiable input tagged with a caller-defined parameter slot,
    /// reported back by [`Gradients::params`].
    pub fn param(&self, slot: usize, t: Tensor) -> Var<'_> {
        let v = self.push(t, Op::Leaf, true);
        self.nodes.borrow_mut()[v.id].param = Some(slot);
        v
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?
            .value();
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Parameter(format!("concat axis {axis} >= rank {rank}")));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != rank
                || s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat shapes {:?} and {:?} differ off axis {axis}",
                    first.shape(),
                    s
                )));
            }
            axis_lens.push(s[axis]);
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total: usize = axis_lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&axis_lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis_lens,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let params = nodes[..=root.id]
            .iter()
            .enumerate()
            .filter_map(|(id, n)| n.param.map(|slot| (slot, id)))
            .collect();
        let shapes = nodes[..=root.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.data();
    let out = nodes[id].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let d = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, d);
            }
            if needs(*b) {
                let d = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                accumulate(grads, *b, d);
            }
        }
        Op::AddBcast(a, b, map) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                let mut d = vec![0.0; val(*b).len()];
                for (gi, &m) in g.iter().zip(map.iter()) {
                    d[m] += gi;
                }
                accumulate(grads, *b, d);
            }
        }
        Op::MulBcast(a, b, map) => {
            let bv = val(*b);
            if needs(*a) {
                let d = g.iter().zip(map.iter()).map(|(g, &m)| g * bv[m]).collect();
                accumulate(grads, *a, d);
            }
            if needs(*b) {
                let av = val(*a);
                let mut d = vec![0.0; bv.len()];
                for ((gi, &m), x) in g.iter().zip(map.iter()).zip(av) {
                    d[m] += gi * x;
                }
                accumulate(grads, *b, d);
            }
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
        Op::Offset(a) => accumulate(grads, *a, g.to_vec()),
        Op::Unary(a, f) => {
            let d = g
                .iter()
                .zip(val(*a))
                .zip(out)
                .map(|((g, &x), &y)| g * f.derivative(x, y))
                .collect();
            accumulate(grads, *a, d);
        }
        Op::SumTo(a, map) => {
            let d = map.iter().map(|&m| g[m]).collect();
            accumulate(grads, *a, d);
        }
        Op::BroadcastTo(a, map) => {
            let mut d = vec![0.0; val(*a).len()];
            for (gi, &m) in g.iter().zip(map.iter()) {
                d[m] += gi;
            }
            accumulate(grads, *a, d);
        }
        Op::MaxAxis(a, argmax) => {
            let mut d = vec![0.0; val(*a).len()];
            for (gi, &src) in g.iter().zip(argmax) {
                d[src] += gi;
            }
            accumulate(grads, *a, d);
        }
        Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
        Op::Concat {
            parts,
            axis_lens,
            outer,
            inner,
        } => {
            let total: usize = axis_lens.iter().sum();
            let mut offset = 0;
            for (&p, &len) in parts.iter().zip(axis_lens) {
                if needs(p) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(grads, p, d);
                }
                offset += len;
            }
        }
        Op::Slice {
            x,
            start,
            len,
            axis_len,
            outer,
            inner,
        } => {
            let mut d = vec![0.0; outer * axis_len * inner];
            for o in 0..*outer {
                let dst = (o * axis_len + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *x, d);
        }
        Op::Conv2d { x, k, b, geo, dims } => {
            let need = (needs(*x), needs(*k), b.map(needs).unwrap_or(false));
            let cg = kernels::conv2d_backward(g, val(*x), val(*k), dims, geo, need);
            if let Some(dx) = cg.input {
                accumulate(grads, *x, dx);
            }
            if let Some(dk) = cg.kernel {
                accumulate(grads, *k, dk);
            }
            if let (Some(b), Some(db)) = (b, cg.bias) {
                accumulate(grads, *b, db);
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            d_in,
            d_out,
        } => {
            if needs(*x) {
                let mut dx = vec![0.0; rows * d_in];
                kernels::gemm(*rows, *d_out, *d_in, 1.0, g, false, val(*w), false, 0.0, &mut dx);
                accumulate(grads, *x, dx);
            }
            if needs(*w) {
                let mut dw = vec![0.0; d_out * d_in];
                kernels::gemm(*d_out, *rows, *d_in, 1.0, g, true, val(*x), false, 0.0, &mut dw);
                accumulate(grads, *w, dw);
            }
            if let Some(b) = b {
                if needs(*b) {
                    let mut db = vec![0.0; *d_out];
                    for row in g.chunks(*d_out) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(grads, *b, db);
                }
            }
        }
        Op::Softmax(a, map) => {
            let groups = map.iter().copied().max().map_or(0, |m| m + 1);
            let mut dot = vec![0.0; groups];
            for ((gi, y), &m) in g.iter().zip(out).zip(map.iter()) {
                dot[m] += gi * y;
            }
            let d = g
                .iter()
                .zip(out)
                .zip(map.iter())
                .map(|((gi, y), &m)| y * (gi - dot[m]))
                .collect();
            accumulate(grads, *a, d);
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = val(*logits);
            let n = targets.len();
            let s = lv.len() / n;
            let mut d = vec![0.0; lv.len()];
            for (r, &t) in targets.iter().enumerate() {
                let row = &lv[r * s..(r + 1) * s];
                let probs = softmax_row(row);
                for (j, p) in probs.into_iter().enumerate() {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    d[r * s + j] = g[0] * (p - onehot) / n as f64;
                }
            }
            accumulate(grads, *logits, d);
        }
        Op::AngularMargin {
            cos,
            targets,
            margin,
        } => {
            let cv = val(*cos);
            let s = cv.len() / targets.len();
            let mut d = g.to_vec();
            for (r, &t) in targets.iter().enumerate() {
                let i = r * s + t;
                d[i] *= margin_derivative(cv[i], *margin);
            }
            accumulate(grads, *cos, d);
        }
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `cos(theta + m)` for `theta = acos(c)`, switching to the monotone
/// penalty `c - m sin(m)` once `theta + m` would pass pi.
pub(crate) fn margin_value(c: f64, m: f64) -> f64 {
    let threshold = (std::f64::consts::PI - m).cos();
    if c > threshold {
        let sin_t = (1.0 - c * c).max(0.0).sqrt();
        c * m.cos() - sin_t * m.sin()
    } else {
        c - m * m.sin()
    }
}

fn margin_derivative(c: f64, m: f64) -> f64 {
    let threshold = (std::f64::consts::PI - m).cos();
    if c > threshold {
        let sin_t = (1.0 - c * c).max(1e-24).sqrt();
        m.cos() + c * m.sin() / sin_t
    } else {
        1.0
    }
}

/// For each element of `out_shape`, the flat index of the matching element
/// of `src_shape`, which has the same rank and extents of 1 or equal.
fn broadcast_map(out_shape: &[usize], src_shape: &[usize]) -> Result<Vec<usize>> {
    if out_shape.len() != src_shape.len()
        || out_shape
            .iter()
            .zip(src_shape)
            .any(|(&o, &s)| s != 1 && s != o)
    {
        return Err(Error::Dimension(format!(
            "cannot broadcast {src_shape:?} to {out_shape:?}"
        )));
    }
    let src_strides = strides_of(src_shape);
    let eff: Vec<usize> = src_shape
        .iter()
        .zip(&src_strides)
        .map(|(&s, &st)| if s == 1 { 0 } else { st })
        .collect();
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(map)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor of shape {:?}", v.shape());
        v.data()[0]
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        Ok((a, b))
    }

    fn binary(&self, other: &Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, what)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(a.shape(), data)?, op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// `self + other`, with `other` broadcast along its extent-1 axes.
    pub fn add_bcast(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let map = broadcast_map(a.shape(), b.shape())?;
        let data = a.data().iter().zip(&map).map(|(x, &m)| x + b.data()[m]).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(a.shape(), data)?,
            Op::AddBcast(self.id, other.id, Rc::new(map)),
            rg,
        ))
    }

    /// `self * other`, with `other` broadcast along its extent-1 axes.
    pub fn mul_bcast(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let map = broadcast_map(a.shape(), b.shape())?;
        let data = a.data().iter().zip(&map).map(|(x, &m)| x * b.data()[m]).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(a.shape(), data)?,
            Op::MulBcast(self.id, other.id, Rc::new(map)),
            rg,
        ))
    }

    pub fn sub_bcast(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.add_bcast(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        self.tape.push(
            Tensor::new(a.shape(), data).expect("shape preserved"),
            Op::Scale(self.id, c),
            self.requires_grad(),
        )
    }

    pub fn offset(&self, c: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x + c).collect();
        self.tape.push(
            Tensor::new(a.shape(), data).expect("shape preserved"),
            Op::Offset(self.id),
            self.requires_grad(),
        )
    }

    pub fn unary(&self, f: Unary) -> Result<Var<'t>> {
        let a = self.value();
        match f {
            Unary::Log => {
                if let Some(v) = a.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain(format!("log of non-positive value {v}")));
                }
            }
            Unary::Sqrt => {
                if let Some(v) = a.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
                    return Err(Error::Domain(format!("sqrt of negative value {v}")));
                }
            }
            Unary::Recip
                if a.data().contains(&0.0) => {
                    return Err(Error::Domain("reciprocal of zero".into()));
                }
            _ => {}
        }
        let data = a.data().iter().map(|&x| f.apply(x)).collect();
        Ok(self.tape.push(
            Tensor::new(a.shape(), data)?,
            Op::Unary(self.id, f),
            self.requires_grad(),
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu).expect("relu is total")
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh).expect("tanh is total")
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp).expect("exp is total")
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square).expect("square is total")
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt)
    }

    pub fn recip(&self) -> Result<Var<'t>> {
        self.unary(Unary::Recip)
    }

    fn reduced_shape(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axes.is_empty() {
            return Err(Error::Parameter("reduce over an empty axis set".into()));
        }
        let mut out = shape.clone();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::Parameter(format!(
                    "axis {a} out of range for rank {}",
                    shape.len()
                )));
            }
            out[a] = 1;
        }
        Ok(out)
    }

    /// Reduction over `axes`, keeping them as extent-1 axes.
    pub fn reduce(&self, axes: &[usize], mode: ReduceMode) -> Result<Var<'t>> {
        let out_shape = self.reduced_shape(axes)?;
        match mode {
            ReduceMode::Sum => {
                let a = self.value();
                let map = broadcast_map(a.shape(), &out_shape)?;
                let mut data = vec![0.0; out_shape.iter().product()];
                for (x, &m) in a.data().iter().zip(&map) {
                    data[m] += x;
                }
                Ok(self.tape.push(
                    Tensor::new(&out_shape, data)?,
                    Op::SumTo(self.id, Rc::new(map)),
                    self.requires_grad(),
                ))
            }
            ReduceMode::Mean => {
                let count = self.value().len() / out_shape.iter().product::<usize>();
                Ok(self.reduce(axes, ReduceMode::Sum)?.scale(1.0 / count as f64))
            }
            ReduceMode::Std => {
                let mean = self.reduce(axes, ReduceMode::Mean)?;
                let centered = self.sub_bcast(&mean)?;
                centered
                    .square()
                    .reduce(axes, ReduceMode::Mean)?
                    .offset(STD_EPSILON)
                    .sqrt()
            }
        }
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(axes, ReduceMode::Sum)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(axes, ReduceMode::Mean)
    }

    pub fn std(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(axes, ReduceMode::Std)
    }

    /// Sum of every element, as a shape-`[1]` tensor.
    pub fn sum_all(&self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes)?.reshape(&[1])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let map = broadcast_map(shape, a.shape())?;
        let data = map.iter().map(|&m| a.data()[m]).collect();
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::BroadcastTo(self.id, Rc::new(map)),
            self.requires_grad(),
        ))
    }

    /// Hard maximum along `axis` (kept as extent 1); the gradient flows to
    /// the first maximal element only.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let out_shape = self.reduced_shape(&[axis])?;
        let map = broadcast_map(a.shape(), &out_shape)?;
        let n_out: usize = out_shape.iter().product();
        let mut best = vec![f64::NEG_INFINITY; n_out];
        let mut arg = vec![usize::MAX; n_out];
        for (i, (&x, &m)) in a.data().iter().zip(&map).enumerate() {
            if arg[m] == usize::MAX || x > best[m] {
                best[m] = x;
                arg[m] = i;
            }
        }
        Ok(self.tape.push(
            Tensor::new(&out_shape, best)?,
            Op::MaxAxis(self.id, arg),
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let t = a.reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.tape.push(
            Tensor::new(&out_shape, data)?,
            Op::Slice {
                x: self.id,
                start,
                len,
                axis_len,
                outer,
                inner,
            },
            self.requires_grad(),
        ))
    }

    /// 2D cross-correlation over the last two axes.
    ///
    /// `self` is `(C_in, F, T)` or `(N, C_in, F, T)`; `kernels` is
    /// `(C_out, C_in, k_f, k_t)`; `bias`, when given, is `(C_out)`.
    pub fn conv2d(
        &self,
        kernels: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: (usize, usize),
        dilation: (usize, usize),
        padding: Padding,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let k = kernels.value();
        let (batched, n, xs) = match x.shape() {
            &[c, f, t] => (false, 1, [c, f, t]),
            &[n, c, f, t] => (true, n, [c, f, t]),
            s => return Err(Error::Dimension(format!("conv2d input must be rank 3 or 4, got {s:?}"))),
        };
        let &[c_out, c_in, kh, kw] = k.shape() else {
            return Err(Error::Dimension(format!(
                "conv2d kernels must be rank 4, got {:?}",
                k.shape()
            )));
        };
        if c_in != xs[0] {
            return Err(Error::Dimension(format!(
                "conv2d: input has {} channels, kernels expect {c_in}",
                xs[0]
            )));
        }
        if let Some(b) = bias {
            if b.value().shape() != [c_out] {
                return Err(Error::Dimension(format!(
                    "conv2d bias must be [{c_out}], got {:?}",
                    b.value().shape()
                )));
            }
        }
        let geo = Conv2dGeometry::resolve((xs[1], xs[2]), (kh, kw), stride, dilation, padding)?;
        let (ho, wo) = geo.output((xs[1], xs[2]), (kh, kw))?;
        let dims = ConvDims {
            n,
            c_in,
            h: xs[1],
            w: xs[2],
            c_out,
            kh,
            kw,
            ho,
            wo,
        };
        let bias_val = bias.map(|b| b.value());
        let data = kernels::conv2d_forward(x.data(), k.data(), bias_val.as_ref().map(|b| b.data()), &dims, &geo);
        let shape: Vec<usize> = if batched {
            vec![n, c_out, ho, wo]
        } else {
            vec![c_out, ho, wo]
        };
        let rg = self.requires_grad()
            || kernels.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(self.tape.push(
            Tensor::new(&shape, data)?,
            Op::Conv2d {
                x: self.id,
                k: kernels.id,
                b: bias.map(|b| b.id),
                geo,
                dims,
            },
            rg,
        ))
    }

    /// Dilated 1D convolution over time with same padding.
    ///
    /// `self` is `(C_in, T)` or `(N, C_in, T)`; `kernels` is `(C_out, C_in, k)`.
    pub fn conv1d(&self, kernels: &Var<'t>, bias: Option<&Var<'t>>, dilation: usize) -> Result<Var<'t>> {
        if dilation == 0 {
            return Err(Error::Parameter("dilation must be >= 1".into()));
        }
        let shape = self.shape();
        let ks = kernels.shape();
        let &[c_out, c_in, k] = ks.as_slice() else {
            return Err(Error::Dimension(format!("conv1d kernels must be rank 3, got {ks:?}")));
        };
        let (x4, out_shape): (Var<'t>, Vec<usize>) = match shape.as_slice() {
            &[c, t] => (self.reshape(&[1, c, 1, t])?, vec![c_out, t]),
            &[n, c, t] => (self.reshape(&[n, c, 1, t])?, vec![n, c_out, t]),
            s => return Err(Error::Dimension(format!("conv1d input must be rank 2 or 3, got {s:?}"))),
        };
        let k4 = kernels.reshape(&[c_out, c_in, 1, k])?;
        x4.conv2d(&k4, bias, (1, 1), (1, dilation), Padding::Same)?
            .reshape(&out_shape)
    }

    /// Affine map `x W^T + b` along the trailing axis; `weight` is `(D_out, D_in)`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let &[d_out, d_in] = w.shape() else {
            return Err(Error::Dimension(format!("linear weight must be rank 2, got {:?}", w.shape())));
        };
        let last = *x.shape().last().expect("tensors have rank >= 1");
        if last != d_in {
            return Err(Error::Dimension(format!(
                "linear: trailing extent {last} != weight input {d_in}"
            )));
        }
        let rows = x.len() / d_in;
        let mut data = vec![0.0; rows * d_out];
        kernels::gemm(rows, d_in, d_out, 1.0, x.data(), false, w.data(), true, 0.0, &mut data);
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [d_out] {
                return Err(Error::Dimension(format!(
                    "linear bias must be [{d_out}], got {:?}",
                    bv.shape()
                )));
            }
            for row in data.chunks_mut(d_out) {
                row.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = d_out;
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(self.tape.push(
            Tensor::new(&shape, data)?,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                rows,
                d_in,
                d_out,
            },
            rg,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let out_shape = self.reduced_shape(&[axis])?;
        let map = broadcast_map(a.shape(), &out_shape)?;
        let groups: usize = out_shape.iter().product();
        let mut max = vec![f64::NEG_INFINITY; groups];
        for (&x, &m) in a.data().iter().zip(&map) {
            max[m] = max[m].max(x);
        }
        let mut data: Vec<f64> = a.data().iter().zip(&map).map(|(&x, &m)| (x - max[m]).exp()).collect();
        let mut z = vec![0.0; groups];
        for (&e, &m) in data.iter().zip(&map) {
            z[m] += e;
        }
        data.iter_mut().zip(&map).for_each(|(e, &m)| *e /= z[m]);
        Ok(self.tape.push(
            Tensor::new(a.shape(), data)?,
            Op::Softmax(self.id, Rc::new(map)),
            self.requires_grad(),
        ))
    }

    /// Mean softmax cross-entropy of `(N, S)` logits against class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let &[n, s] = a.shape() else {
            return Err(Error::Dimension(format!("cross_entropy logits must be (N, S), got {:?}", a.shape())));
        };
        if targets.len() != n {
            return Err(Error::Dimension(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= s) {
            return Err(Error::Input(format!("target {t} out of range for {s} classes")));
        }
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &a.data()[r * s..(r + 1) * s];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        Ok(self.tape.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Replaces the target column of `(N, S)` cosines by `cos(theta + margin)`.
    pub fn angular_margin(&self, targets: &[usize], margin: f64) -> Result<Var<'t>> {
        let a = self.value();
        let &[n, s] = a.shape() else {
            return Err(Error::Dimension(format!("angular_margin expects (N, S), got {:?}", a.shape())));
        };
        if targets.len() != n {
            return Err(Error::Dimension(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= s) {
            return Err(Error::Input(format!("target {t} out of range for {s} classes")));
        }
        let mut data = a.data().to_vec();
        for (r, &t) in targets.iter().enumerate() {
            data[r * s + t] = margin_value(data[r * s + t], margin);
        }
        Ok(self.tape.push(
            Tensor::new(a.shape(), data)?,
            Op::AngularMargin {
                cos: self.id,
                targets: targets.to_vec(),
                margin,
            },
            self.requires_grad(),
        ))
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: &Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::new(&self.shapes[v.id], g.clone()).expect("gradient matches value shape"))
    }

    /// `(slot, gradient)` for every parameter leaf that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(slot, id)| self.grads[id].as_deref().map(|g| (slot, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_positions() {
        let map = broadcast_map(&[2, 3], &[1, 3]).unwrap();
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
        let map = broadcast_map(&[2, 3], &[2, 1]).unwrap();
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        assert!(broadcast_map(&[2, 3], &[3]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = x.sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.0));
        let c = 3.0;
        let loss = w.sigmoid().scale(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[0.25 * c]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn log_domain_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(x.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn reduce_rejects_empty_axes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(x.mean(&[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 2.0));
        let x = tape.leaf(Tensor::full(&[2], 3.0));
        let loss = c.mul(&x).unwrap().sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(&c).is_none());
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn margin_switches_past_pi() {
        let m = 0.3;
        assert!((margin_value(1.0, m) - m.cos()).abs() < 1e-15);
        let c = -0.99;
        assert!((margin_value(c, m) - (c - m * m.sin())).abs() < 1e-15);
    }
}
