//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever its adjoint
//! rule needs. Nodes are only ever appended, so creation order is a
//! topological order and [`Tape::backward`] visits nodes once, newest first.
//! Leaf gradients accumulate across repeated `backward` calls until
//! [`Tape::zero_grad`].

mod nn;
mod scan;
mod spatial;

pub use scan::{Directions, ScanMode, ScanSpec};
pub use spatial::bilinear_taps;

use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::tensor::{broadcast_shape, broadcast_zip, for_each_broadcast, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Log,
    Square,
    Relu,
    Sigmoid,
    Silu,
    Softplus,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Unary(UnaryKind, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    LayerNorm(Box<nn::LayerNormSaved<T>>),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Interleave(Var, Var),
    Phase {
        x: Var,
        row: usize,
        col: usize,
    },
    Warp {
        coarse: Var,
        flow: Var,
    },
    Resize {
        x: Var,
        factor: usize,
    },
    SelectiveScan(Box<scan::ScanSaved<T>>),
}

pub(crate) struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records operations for one forward pass and replays them backwards.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Lazily allocated gradient buffers indexed by node.
pub(crate) struct Grads<T> {
    bufs: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    lens: Vec<usize>,
}

impl<T: Float> Grads<T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first access.
    pub(crate) fn buf(&mut self, v: Var) -> &mut [T] {
        let len = self.lens[v.0];
        self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub(crate) fn add(&mut self, v: Var, g: &[T]) {
        if !self.wants(v) {
            return;
        }
        match &mut self.bufs[v.0] {
            Some(b) => b.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn add_owned(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.bufs[v.0] {
            Some(b) => b.iter_mut().zip(&g).for_each(|(b, &x)| *b += x),
            slot @ None => *slot = Some(g),
        }
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding a copy of `t`; it participates in differentiation
    /// when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// A trainable leaf.
    pub fn param(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_raw(t.shape().to_vec(), t.into_data(), Op::Leaf, true))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_raw(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push_raw(Vec::new(), vec![value], Op::Leaf, false)
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(shape, value, op, requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Back-propagates from a scalar `loss`, adding into the gradient of every
    /// leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        let mut grads = Grads {
            bufs: (0..self.nodes.len()).map(|_| None).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        };
        if !node.requires_grad {
            return Ok(());
        }
        grads.bufs[loss.0] = Some(vec![T::one()]);
        let mut leaves = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads.bufs[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                leaves.push((idx, g));
            } else {
                self.backward_node(idx, &g, &mut grads)?;
            }
        }
        for (idx, g) in leaves {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut Grads<T>) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => self.backward_binary(*kind, *a, *b, &node.shape, g, grads),
            Op::AddScalar(a) => grads.add(*a, g),
            Op::MulScalar(a, s) => {
                if grads.wants(*a) {
                    let s = *s;
                    grads.buf(*a).iter_mut().zip(g).for_each(|(d, &x)| *d += x * s);
                }
            }
            Op::Unary(kind, a) => self.backward_unary(*kind, *a, &node.value, g, grads),
            Op::Sum(a) => {
                if grads.wants(*a) {
                    let s = g[0];
                    grads.buf(*a).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Mean(a) => {
                if grads.wants(*a) {
                    let s = g[0] / T::lit(self.nodes[a.0].value.len() as f64);
                    grads.buf(*a).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Reshape(a) => grads.add(*a, g),
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::Transpose(a) => {
                let s = &self.nodes[a.0].shape;
                let (r, c) = (s[0], s[1]);
                if grads.wants(*a) {
                    let buf = grads.buf(*a);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Conv2d { x, weight, bias, geom } => self.backward_conv(*x, *weight, *bias, geom, g, grads),
            Op::LayerNorm(saved) => self.backward_layer_norm(saved, g, grads),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    grads.add(*p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                if grads.wants(*x) {
                    let plane: usize = self.nodes[x.0].shape[1..].iter().product();
                    let off = start * plane;
                    grads.buf(*x)[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &v)| *d += v);
                }
            }
            Op::Softmax(x) => self.backward_softmax(*x, &node.value, g, grads, false),
            Op::LogSoftmax(x) => self.backward_softmax(*x, &node.value, g, grads, true),
            Op::Interleave(a, b) => self.backward_interleave(*a, *b, g, grads),
            Op::Phase { x, row, col } => self.backward_phase(*x, *row, *col, g, grads),
            Op::Warp { coarse, flow } => self.backward_warp(*coarse, *flow, g, grads),
            Op::Resize { x, factor } => self.backward_resize(*x, *factor, g, grads),
            Op::SelectiveScan(saved) => self.backward_scan(saved, g, grads)?,
        }
        Ok(())
    }

    // ----- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb)?;
        let f = match kind {
            BinaryKind::Add => |x: T, y: T| x + y,
            BinaryKind::Sub => |x: T, y: T| x - y,
            BinaryKind::Mul => |x: T, y: T| x * y,
            BinaryKind::Div => |x: T, y: T| x / y,
        };
        let value = broadcast_zip(self.value(a), sa, self.value(b), sb, &shape, f);
        Ok(self.push(shape, value, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).iter().map(|&x| x + s).collect();
        self.push(self.shape(a).to_vec(), value, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), value, Op::MulScalar(a, s), &[a])
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(T) -> T = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => |x| x.exp(),
            UnaryKind::Log => |x| x.ln(),
            UnaryKind::Square => |x| x * x,
            UnaryKind::Relu => |x| x.max(T::zero()),
            UnaryKind::Sigmoid => crate::scan1d::sigmoid,
            UnaryKind::Silu => |x| x * crate::scan1d::sigmoid(x),
            UnaryKind::Softplus => crate::scan1d::softplus,
        };
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), value, Op::Unary(kind, a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len().max(1) as f64);
        self.push(Vec::new(), vec![s], Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape, value, Op::Reshape(a), &[a]))
    }

    fn backward_binary(&self, kind: BinaryKind, a: Var, b: Var, out_shape: &[usize], g: &[T], grads: &mut Grads<T>) {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (va, vb) = (&na.value, &nb.value);
        if grads.wants(a) {
            let mut ga = vec![T::zero(); va.len()];
            for_each_broadcast(&na.shape, &nb.shape, out_shape, |o, ia, ib| {
                ga[ia] += match kind {
                    BinaryKind::Add | BinaryKind::Sub => g[o],
                    BinaryKind::Mul => g[o] * vb[ib],
                    BinaryKind::Div => g[o] / vb[ib],
                };
            });
            grads.add_owned(a, ga);
        }
        if grads.wants(b) {
            let mut gb = vec![T::zero(); vb.len()];
            for_each_broadcast(&na.shape, &nb.shape, out_shape, |o, ia, ib| {
                gb[ib] += match kind {
                    BinaryKind::Add => g[o],
                    BinaryKind::Sub => -g[o],
                    BinaryKind::Mul => g[o] * va[ia],
                    BinaryKind::Div => -g[o] * va[ia] / (vb[ib] * vb[ib]),
                };
            });
            grads.add_owned(b, gb);
        }
    }

    fn backward_unary(&self, kind: UnaryKind, a: Var, out: &[T], g: &[T], grads: &mut Grads<T>) {
        if !grads.wants(a) {
            return;
        }
        let x = &self.nodes[a.0].value;
        let buf = grads.buf(a);
        for i in 0..buf.len() {
            let d = match kind {
                UnaryKind::Neg => -T::one(),
                UnaryKind::Exp => out[i],
                UnaryKind::Log => T::one() / x[i],
                UnaryKind::Square => T::lit(2.0) * x[i],
                UnaryKind::Relu => {
                    if x[i] > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Sigmoid => out[i] * (T::one() - out[i]),
                UnaryKind::Silu => {
                    let s = crate::scan1d::sigmoid(x[i]);
                    s * (T::one() + x[i] * (T::one() - s))
                }
                UnaryKind::Softplus => crate::scan1d::sigmoid(x[i]),
            };
            buf[i] += g[i] * d;
        }
    }
}
