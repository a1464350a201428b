//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every differentiable op appends a node to a [`Tape`]: the output value,
//! the ids of its inputs and a closure mapping the output gradient to input
//! gradients. [`Tape::backward`] replays the nodes in exact reverse order of
//! recording, so two backward passes from the same state give bitwise
//! identical gradients.
//!
//! Nodes never mutate their values after recording. Parameters enter the tape
//! through [`Tape::param`], which tags the leaf with a name; gradients for
//! named parameters are accumulated into [`Gradients::params`].

use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::{check_invertible, Lu};
use crate::tensor::{
    broadcast_index, conv2d_forward, conv2d_grad_bias, conv2d_grad_input, conv2d_grad_kernel,
    matmul_raw, slice_channels_raw, squeeze_raw, transpose_raw, unsqueeze_raw, ConvGeom, Scalar,
    Tensor,
};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    param: Option<Rc<str>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Gradients of every named parameter reached by the backward pass, ordered by name.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            backward_done: Cell::new(false),
        }
    }

    /// A tape that records values only; no backward closures are kept.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.backward_done.set(false);
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf_node(&self, value: Tensor<T>, requires_grad: bool, param: Option<Rc<str>>) -> Result<Var<'_, T>> {
        if let Some(i) = value.first_non_finite() {
            return Err(Error::numeric("leaf", format!("non-finite value at index {i}")));
        }
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            param,
            backward: None,
        }))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf_node(value, false, None)
    }

    /// Records an input that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf_node(value, true, None)
    }

    /// Records a named parameter; its gradient is reported under `name`.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf_node(value.clone(), true, Some(Rc::from(name)))
    }

    pub fn value(&self, v: Var<'_, T>) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    fn record<F>(&self, op: &str, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Result<Var<'_, T>>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if let Some(i) = value.first_non_finite() {
            return Err(Error::numeric(op, format!("non-finite output at index {i}")));
        }
        let nodes = self.nodes.borrow();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            param: None,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        }))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::contract("backward called on an empty tape"));
        }
        if self.backward_done.get() {
            return Err(Error::contract(
                "backward already ran on this tape; reset it before calling again",
            ));
        }
        let loss_value = &nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(loss_value.shape()));
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(bw) = &node.backward {
                let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let contribs = bw(&g, &mask);
                for ((&p, c), &needed) in node.parents.iter().zip(contribs).zip(&mask) {
                    let Some(c) = c else { continue };
                    if !needed {
                        continue;
                    }
                    grads[p] = Some(match grads[p].take() {
                        Some(acc) => add_same(&acc, &c),
                        None => c,
                    });
                }
            }
            grads[i] = Some(g);
        }

        let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (i, g) in grads.iter().enumerate() {
            if let (Some(name), Some(g)) = (&nodes[i].param, g) {
                match params.get_mut(name.as_ref()) {
                    Some(acc) => *acc = add_same(acc, g),
                    None => {
                        params.insert(name.to_string(), g.clone());
                    }
                }
            }
        }
        // Parameters that were recorded but unreachable from the loss get zeros.
        for node in nodes[..=loss.id].iter() {
            if let Some(name) = &node.param {
                if node.requires_grad && !params.contains_key(name.as_ref()) {
                    params.insert(name.to_string(), Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(Gradients { by_node: grads, params })
    }
}

fn add_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.zip_map(b, |x, y| x + y).expect("gradient shapes agree")
}

fn reduce_broadcast<T: Scalar>(g: &[T], map: &Option<Rc<Vec<usize>>>, shape: &[usize]) -> Tensor<T> {
    match map {
        None => Tensor::new(shape.to_vec(), g.to_vec()).expect("same shape"),
        Some(map) => {
            let mut out = Tensor::zeros(shape);
            let d = out.data_mut();
            for (&gi, &j) in g.iter().zip(map.iter()) {
                d[j] = d[j] + gi;
            }
            out
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Tanh,
    Relu,
    Neg,
    Abs,
    Square,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(*self)
    }

    /// Clone of the recorded value.
    pub fn tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.node().value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// The single value of a one-element var.
    pub fn item(&self) -> T {
        self.node().value.item()
    }

    fn node(&self) -> Ref<'_, Node<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different tapes"))
        }
    }

    /// Elementwise binary op; `other` may broadcast (trailing-aligned) to `self`'s shape.
    pub fn binary(self, op: BinaryOp, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let map = broadcast_index(a.shape(), b.shape())?.map(Rc::new);
        let bval = |i: usize| match &map {
            None => b.data()[i],
            Some(m) => b.data()[m[i]],
        };
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data: Vec<T> = a.data().iter().enumerate().map(|(i, &x)| f(x, bval(i))).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let b_shape = b.shape().to_vec();
        let a_shape = a.shape().to_vec();
        let name = format!("{op:?}").to_lowercase();
        self.tape.record(&name, out, &[self, other], move |g, need| {
            let bv = |i: usize| match &map {
                None => b.data()[i],
                Some(m) => b.data()[m[i]],
            };
            let gd = g.data();
            let (ga, gb): (Option<Vec<T>>, Option<Vec<T>>) = match op {
                BinaryOp::Add => (need[0].then(|| gd.to_vec()), need[1].then(|| gd.to_vec())),
                BinaryOp::Sub => (
                    need[0].then(|| gd.to_vec()),
                    need[1].then(|| gd.iter().map(|&v| -v).collect()),
                ),
                BinaryOp::Mul => (
                    need[0].then(|| gd.iter().enumerate().map(|(i, &v)| v * bv(i)).collect()),
                    need[1].then(|| gd.iter().zip(a.data()).map(|(&v, &x)| v * x).collect()),
                ),
                BinaryOp::Div => (
                    need[0].then(|| gd.iter().enumerate().map(|(i, &v)| v / bv(i)).collect()),
                    need[1].then(|| {
                        gd.iter()
                            .zip(a.data())
                            .enumerate()
                            .map(|(i, (&v, &x))| -v * x / (bv(i) * bv(i)))
                            .collect()
                    }),
                ),
            };
            vec![
                ga.map(|d| Tensor::new(a_shape.clone(), d).expect("shape")),
                gb.map(|d| reduce_broadcast(&d, &map, &b_shape)),
            ]
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn unary(self, op: UnaryOp) -> Result<Var<'t, T>> {
        let x = self.value();
        if op == UnaryOp::Log {
            if let Some(i) = x.data().iter().position(|&v| !(v > T::zero())) {
                return Err(Error::Domain {
                    index: i,
                    msg: format!("log of non-positive value {}", x.data()[i]),
                });
            }
        }
        let f: fn(T) -> T = match op {
            UnaryOp::Exp => |v| v.exp(),
            UnaryOp::Log => |v| v.ln(),
            UnaryOp::Tanh => |v| v.tanh(),
            UnaryOp::Relu => |v| if v > T::zero() { v } else { T::zero() },
            UnaryOp::Neg => |v| -v,
            UnaryOp::Abs => |v| v.abs(),
            UnaryOp::Square => |v| v * v,
        };
        let out = x.map(f);
        let y = Rc::new(out.clone());
        let name = format!("{op:?}").to_lowercase();
        self.tape.record(&name, out, &[self], move |g, _| {
            let d: fn(T, T) -> T = match op {
                UnaryOp::Exp => |_, y| y,
                UnaryOp::Log => |x, _| T::one() / x,
                UnaryOp::Tanh => |_, y| T::one() - y * y,
                UnaryOp::Relu => |x, _| if x > T::zero() { T::one() } else { T::zero() },
                UnaryOp::Neg => |_, _| -T::one(),
                UnaryOp::Abs => |x, _| x.signum(),
                UnaryOp::Square => |x, _| x + x,
            };
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| gv * d(xv, yv))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("shape"))]
        })
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Log)
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Relu)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Neg)
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Abs)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Square)
    }

    /// `self * c` for a constant `c`.
    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v * c);
        self.tape
            .record("scale", out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    /// `self + c` for a constant `c`.
    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v + c);
        self.tape
            .record("add_scalar", out, &[self], |g, _| vec![Some(g.clone())])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.map(|v| v.max(lo).min(hi));
        self.tape.record("clamp", out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { T::zero() })
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("shape"))]
        })
    }

    /// Gradient reversal: identity forward, negated gradient backward.
    pub fn grl(self) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone();
        self.tape
            .record("grl", out, &[self], |g, _| vec![Some(g.map(|v| -v))])
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape.record("sum", out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = T::lit(self.numel() as f64);
        self.sum()?.scale(T::one() / n)
    }

    /// `[N, ...] -> [N]`, summing every non-batch element of each sample.
    pub fn sum_per_sample(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape
            .first()
            .ok_or_else(|| Error::dim("sum_per_sample needs a batch axis"))?;
        let per = x.numel() / n;
        let out = Tensor::from_vec(
            x.data().chunks(per).map(|c| c.iter().copied().sum()).collect(),
        );
        self.tape.record("sum_per_sample", out, &[self], move |g, _| {
            let mut d = Vec::with_capacity(n * per);
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv, per));
            }
            vec![Some(Tensor::new(shape.clone(), d).expect("shape"))]
        })
    }

    /// Global average pool: `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        self.tape.record("mean_spatial", out, &[self], move |g, _| {
            let mut d = Vec::with_capacity(n * c * plane);
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv * inv, plane));
            }
            vec![Some(Tensor::new(vec![n, c, h, w], d).expect("shape"))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        self.tape.record("reshape", out, &[self], move |g, _| {
            vec![Some(g.reshape(&orig).expect("shape"))]
        })
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let (m, k, k2, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            (sa, sb) => {
                return Err(Error::dim(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")))
            }
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            )));
        }
        let out = Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        self.tape.record("matmul", out, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let bt = transpose_raw(b.data(), k, n);
                Tensor::new(vec![m, k], matmul_raw(g.data(), &bt, m, n, k)).expect("shape")
            });
            let gb = need[1].then(|| {
                let at = transpose_raw(a.data(), m, k);
                Tensor::new(vec![k, n], matmul_raw(&at, g.data(), k, m, n)).expect("shape")
            });
            vec![ga, gb]
        })
    }

    /// Same-padded, stride-1 cross-correlation of `[N,Cin,H,W]` with
    /// `[Cout,Cin,kh,kw]`, plus an optional per-channel bias `[Cout]`.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(&kernel)?;
        let x = self.value();
        let k = kernel.value();
        let geom = ConvGeom::new(x.shape(), k.shape())?;
        let b = match bias {
            Some(b) => {
                self.same_tape(&b)?;
                let bv = b.value();
                if bv.shape() != [geom.cout] {
                    return Err(Error::dim(format!(
                        "conv2d bias must have shape [{}], got {:?}",
                        geom.cout,
                        bv.shape()
                    )));
                }
                Some(bv)
            }
            None => None,
        };
        let out = conv2d_forward(geom, x.data(), k.data(), b.as_ref().map(|b| b.data()));
        let out = Tensor::new(vec![geom.n, geom.cout, geom.h, geom.w], out)?;
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let kshape = k.shape().to_vec();
        let xshape = x.shape().to_vec();
        self.tape.record("conv2d", out, &parents, move |g, need| {
            let gin = need[0].then(|| {
                Tensor::new(xshape.clone(), conv2d_grad_input(geom, g.data(), k.data())).expect("shape")
            });
            let gk = need[1].then(|| {
                Tensor::new(kshape.clone(), conv2d_grad_kernel(geom, g.data(), x.data())).expect("shape")
            });
            let mut grads = vec![gin, gk];
            if need.len() > 2 {
                grads.push(need[2].then(|| Tensor::from_vec(conv2d_grad_bias(geom, g.data()))));
            }
            grads
        })
    }

    /// Channels `[start, end)` of a `[N, C, ...]` tensor.
    pub fn slice_channels(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 || start >= end || end > shape[1] {
            return Err(Error::dim(format!(
                "channel slice [{start}, {end}) invalid for shape {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        let mut oshape = shape.clone();
        oshape[1] = end - start;
        let out = Tensor::new(oshape, slice_channels_raw(x.data(), n, c, plane, start, end))?;
        self.tape.record("slice_channels", out, &[self], move |g, _| {
            let mut full = vec![T::zero(); n * c * plane];
            let width = end - start;
            for b in 0..n {
                full[(b * c + start) * plane..(b * c + end) * plane]
                    .copy_from_slice(&g.data()[b * width * plane..(b + 1) * width * plane]);
            }
            vec![Some(Tensor::new(shape.clone(), full).expect("shape"))]
        })
    }

    /// Reverses the channel order of a `[N, C, ...]` tensor.
    pub fn reverse_channels(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("reverse_channels needs [N, C, ...], got {shape:?}")));
        }
        let rev = move |d: &[T]| {
            let (n, c) = (shape[0], shape[1]);
            let plane: usize = shape[2..].iter().product();
            let mut out = Vec::with_capacity(d.len());
            for b in 0..n {
                for ch in (0..c).rev() {
                    out.extend_from_slice(&d[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
                }
            }
            Tensor::new(shape.clone(), out).expect("shape")
        };
        let out = rev(x.data());
        self.tape
            .record("reverse_channels", out, &[self], move |g, _| vec![Some(rev(g.data()))])
    }

    /// `[N,C,H,W] -> [N,4C,H/2,W/2]`; see [`crate::flow::squeeze`] for the block order.
    pub fn squeeze2x2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "squeeze needs even spatial dims, got {h}x{w}"
            )));
        }
        let out = Tensor::new(vec![n, 4 * c, h / 2, w / 2], squeeze_raw(x.data(), n, c, h, w))?;
        self.tape.record("squeeze", out, &[self], move |g, _| {
            let d = unsqueeze_raw(g.data(), n, 4 * c, h / 2, w / 2);
            vec![Some(Tensor::new(vec![n, c, h, w], d).expect("shape"))]
        })
    }

    /// Inverse of [`Var::squeeze2x2`].
    pub fn unsqueeze2x2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if c % 4 != 0 {
            return Err(Error::dim(format!(
                "unsqueeze needs a channel count divisible by 4, got {c}"
            )));
        }
        let out = Tensor::new(vec![n, c / 4, h * 2, w * 2], unsqueeze_raw(x.data(), n, c, h, w))?;
        self.tape.record("unsqueeze", out, &[self], move |g, _| {
            let d = squeeze_raw(g.data(), n, c / 4, h * 2, w * 2);
            vec![Some(Tensor::new(vec![n, c, h, w], d).expect("shape"))]
        })
    }

    /// `log|det W|` of a square matrix; gradient `W^{-T}`.
    pub fn log_abs_det(self) -> Result<Var<'t, T>> {
        let w = self.value();
        let n = match w.shape() {
            [a, b] if a == b => *a,
            s => return Err(Error::dim(format!("log_abs_det needs a square matrix, got {s:?}"))),
        };
        let lu = Lu::new(w.data(), n)?;
        check_invertible(&lu)?;
        let out = Tensor::scalar(lu.log_abs_det());
        let inv_t = transpose_raw(&lu.inverse(), n, n);
        self.tape.record("log_abs_det", out, &[self], move |g, _| {
            let s = g.item();
            let d = inv_t.iter().map(|&v| v * s).collect();
            vec![Some(Tensor::new(vec![n, n], d).expect("shape"))]
        })
    }

    /// Row-wise log-softmax of an `[N, K]` tensor.
    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, k) = match x.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::dim(format!("log_softmax needs [N, K], got {s:?}"))),
        };
        let mut out = Vec::with_capacity(n * k);
        for row in x.data().chunks(k) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(vec![n, k], out)?;
        let y = out.clone();
        self.tape.record("log_softmax", out, &[self], move |g, _| {
            let mut d = Vec::with_capacity(n * k);
            for (grow, yrow) in g.data().chunks(k).zip(y.data().chunks(k)) {
                let gs: T = grow.iter().copied().sum();
                d.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| gv - yv.exp() * gs));
            }
            vec![Some(Tensor::new(vec![n, k], d).expect("shape"))]
        })
    }
}

/// Concatenates `[N, C_i, ...]` tensors along the channel axis.
pub fn concat_channels<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of an empty list"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let s0 = values[0].shape().to_vec();
    if s0.len() < 2 {
        return Err(Error::dim(format!("concat needs [N, C, ...], got {s0:?}")));
    }
    let n = s0[0];
    let plane: usize = s0[2..].iter().product();
    let mut widths = Vec::with_capacity(parts.len());
    for (p, v) in parts.iter().zip(&values) {
        first.same_tape(p)?;
        let s = v.shape();
        if s.len() != s0.len() || s[0] != n || s[2..] != s0[2..] {
            return Err(Error::dim(format!("cannot concat {s:?} with {s0:?}")));
        }
        widths.push(s[1]);
    }
    let c: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * c * plane);
    for b in 0..n {
        for (v, &wd) in values.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[b * wd * plane..(b + 1) * wd * plane]);
        }
    }
    let mut shape = s0.clone();
    shape[1] = c;
    let out = Tensor::new(shape, data)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    tape.record("concat_channels", out, parts, move |g, need| {
        let mut grads: Vec<Vec<T>> = widths.iter().map(|&wd| Vec::with_capacity(n * wd * plane)).collect();
        let gd = g.data();
        let mut off = 0;
        for _ in 0..n {
            for (gv, &wd) in grads.iter_mut().zip(&widths) {
                gv.extend_from_slice(&gd[off..off + wd * plane]);
                off += wd * plane;
            }
        }
        grads
            .into_iter()
            .zip(&shapes)
            .zip(need)
            .map(|((d, s), &nd)| nd.then(|| Tensor::new(s.clone(), d).expect("shape")))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(z.exp().unwrap().tensor().data(), &[1.0, 1.0]);
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let b = tape.constant(t(&[3], &[4.0, 5.0, 6.0])).unwrap();
        assert_eq!(a.mul(b).unwrap().tensor().data(), &[4.0, 10.0, 18.0]);
        let x = tape.constant(t(&[2], &[0.3, -1.2])).unwrap();
        let back = x.exp().unwrap().log().unwrap().tensor();
        for (u, v) in back.data().iter().zip([0.3, -1.2]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let b = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(a.mul(b), Err(Error::Dimension(_))));
        let c = tape.constant(t(&[3], &[1.0, 0.0, -1.0])).unwrap();
        match c.log() {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(i2.matmul(m).unwrap().tensor().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.matmul(c).unwrap().tensor().data(), &[11.0]);
        assert!(matches!(r.matmul(r), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(loss).unwrap().data(), &[1.0]);

        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reset_allows_second_pass() {
        let mut tape = Tape::<f64>::new();
        {
            let x = tape.leaf(t(&[1], &[2.0])).unwrap();
            let l = x.square().unwrap().sum().unwrap();
            tape.backward(l).unwrap();
        }
        tape.reset();
        let x = tape.leaf(t(&[1], &[3.0])).unwrap();
        let l = x.square().unwrap().sum().unwrap();
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn grl_forward_identity_backward_negation() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = x.grl().unwrap();
        assert_eq!(y.tensor().data(), &[1.0, 2.0, 3.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 2, 2])).unwrap();
        let b = tape.leaf(t(&[3, 1, 1], &[1.0, 2.0, 3.0])).unwrap();
        let y = x.add(b).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 2, 2]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[8.0, 8.0, 8.0]);
        // Broadcasting never raises rank of the result.
        let big = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(b.add(big).is_err());
    }

    #[test]
    fn params_accumulate_by_name() {
        let tape = Tape::<f64>::new();
        let w = t(&[2], &[1.0, 2.0]);
        let a = tape.param("w", &w).unwrap();
        let b = tape.param("w", &w).unwrap();
        let loss = a.mul(b).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn no_grad_tape_records_no_closures() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let y = x.exp().unwrap();
        assert!(!y.requires_grad());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[1000.0])).unwrap();
        assert!(matches!(x.exp(), Err(Error::Numeric { .. })));
    }
}
