//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Shape errors inside the graph are programming errors and panic; callers
//! validate user-facing shapes before building a graph.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, Conv2dSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow { src: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    SumAxis { src: usize, axis: usize },
    MaxAxis { src: usize, axis: usize, argmax: Vec<usize> },
    SumAll(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Conv2d { x: usize, w: usize, b: Option<usize>, spec: Conv2dSpec },
    AvgPool { src: usize, k: usize },
    Resize { src: usize },
    Softmax(usize),
    LogSoftmax(usize),
    BceWithLogits { src: usize, target: Rc<Tensor<T>> },
    CrossEntropy { src: usize, targets: Vec<usize> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Graph::backward`]: one optional gradient per recorded node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape if it did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> MatDims {
    let (batch, m, k) = match a.len() {
        2 => (1, a[0], a[1]),
        3 => (a[0], a[1], a[2]),
        r => panic!("matmul lhs must be rank 2 or 3, got rank {r}"),
    };
    let (b_batched, kb, n) = match (b.len(), trans_b) {
        (2, false) => (false, b[0], b[1]),
        (2, true) => (false, b[1], b[0]),
        (3, false) => (true, b[1], b[2]),
        (3, true) => (true, b[2], b[1]),
        (r, _) => panic!("matmul rhs must be rank 2 or 3, got rank {r}"),
    };
    assert_eq!(k, kb, "matmul inner dimension mismatch: {a:?} x {b:?} (trans_b={trans_b})");
    if b_batched {
        assert_eq!(a.len(), 3, "batched rhs requires batched lhs");
        assert_eq!(b[0], batch, "matmul batch mismatch");
    }
    MatDims { batch, m, k, n, b_batched }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn derived(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let rg = self.needs(parents);
        self.push(value, op, rg)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Concatenates along `axis`.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.derived(out, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    /// Stacks equally shaped values along a new axis.
    pub fn stack<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        let expanded: Vec<Var<'g, T>> = parts
            .iter()
            .map(|p| {
                let mut shape = p.shape();
                shape.insert(axis, 1);
                p.reshape(shape)
            })
            .collect();
        self.concat(&expanded, axis)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let wants = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| nodes[i].value.as_ref();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], kernels::reduce_to_shape(&g, val(*a).shape()));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], kernels::reduce_to_shape(&g, val(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], kernels::reduce_to_shape(&g, val(*a).shape()));
                    }
                    if wants(*b) {
                        let neg = g.map(|v| -v);
                        accumulate(&mut grads[*b], kernels::reduce_to_shape(&neg, val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let ga = kernels::broadcast_binary(&g, val(*b), |x, y| x * y);
                        accumulate(&mut grads[*a], kernels::reduce_to_shape(&ga, val(*a).shape()));
                    }
                    if wants(*b) {
                        let gb = kernels::broadcast_binary(&g, val(*a), |x, y| x * y);
                        accumulate(&mut grads[*b], kernels::reduce_to_shape(&gb, val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    if wants(*a) {
                        let ga = kernels::broadcast_binary(&g, val(*b), |x, y| x / y);
                        accumulate(&mut grads[*a], kernels::reduce_to_shape(&ga, val(*a).shape()));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -out / b
                        let t = kernels::broadcast_binary(&g, &node.value, |x, y| x * y);
                        let gb = kernels::broadcast_binary(&t, val(*b), |x, y| -x / y);
                        accumulate(&mut grads[*b], kernels::reduce_to_shape(&gb, val(*b).shape()));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads[*a], g.map(|v| v * c));
                }
                Op::AddScalar(a) => accumulate(&mut grads[*a], g),
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                    accumulate(&mut grads[*a], ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y));
                    accumulate(&mut grads[*a], ga);
                }
                Op::Exp(a) => accumulate(&mut grads[*a], g.zip_map(&node.value, |gv, y| gv * y)),
                Op::Log(a) => accumulate(&mut grads[*a], g.zip_map(val(*a), |gv, x| gv / x)),
                Op::Sqrt(a) => {
                    let two = T::one() + T::one();
                    accumulate(&mut grads[*a], g.zip_map(&node.value, |gv, y| gv / (two * y)));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads[*a], g.reshape(shape).expect("reshape grad"));
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    accumulate(&mut grads[*a], g.permute(&inv));
                }
                Op::Narrow { src, axis, start } => {
                    let src_val = val(*src);
                    let (outer, dim, inner) = axis_dims(src_val.shape(), *axis);
                    let len = g.shape()[*axis];
                    let mut full = Tensor::zeros(src_val.shape().to_vec());
                    let fd = full.data_mut();
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        fd[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads[*src], full);
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if wants(p) {
                            accumulate(&mut grads[p], g.narrow(*axis, start, len));
                        }
                        start += len;
                    }
                }
                Op::SumAxis { src, axis } => {
                    let src_val = val(*src);
                    let (outer, dim, inner) = axis_dims(src_val.shape(), *axis);
                    let mut full = Tensor::zeros(src_val.shape().to_vec());
                    let fd = full.data_mut();
                    for o in 0..outer {
                        for d in 0..dim {
                            let dst = (o * dim + d) * inner;
                            fd[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    accumulate(&mut grads[*src], full);
                }
                Op::MaxAxis { src, axis, argmax } => {
                    let src_val = val(*src);
                    let (outer, dim, inner) = axis_dims(src_val.shape(), *axis);
                    let mut full = Tensor::zeros(src_val.shape().to_vec());
                    let fd = full.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = argmax[o * inner + i];
                            fd[(o * dim + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                    accumulate(&mut grads[*src], full);
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    accumulate(&mut grads[*a], Tensor::full(val(*a).shape().to_vec(), gv));
                }
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let d = matmul_dims(av.shape(), bv.shape(), *trans_b);
                    let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
                    let b_stride = if d.b_batched { kn } else { 0 };
                    // strides of op(B) as a k x n matrix
                    let (rsb, csb) = if *trans_b { (1, d.k as isize) } else { (d.n as isize, 1) };
                    if wants(*a) {
                        let mut ga = vec![T::zero(); d.batch * mk];
                        for i in 0..d.batch {
                            // dA (m x k) = dC (m x n) * op(B)^T (n x k)
                            T::gemm(
                                d.m,
                                d.n,
                                d.k,
                                T::one(),
                                &g.data()[i * mn..],
                                d.n as isize,
                                1,
                                &bv.data()[i * b_stride..],
                                csb,
                                rsb,
                                T::zero(),
                                &mut ga[i * mk..],
                                d.k as isize,
                                1,
                            );
                        }
                        accumulate(&mut grads[*a], Tensor::new(av.shape().to_vec(), ga).expect("ga"));
                    }
                    if wants(*b) {
                        let mut gb = vec![T::zero(); bv.len()];
                        for i in 0..d.batch {
                            let dst = &mut gb[i * b_stride..];
                            let beta = if d.b_batched || i == 0 { T::zero() } else { T::one() };
                            if *trans_b {
                                // dB (n x k) = dC^T (n x m) * A (m x k)
                                T::gemm(
                                    d.n,
                                    d.m,
                                    d.k,
                                    T::one(),
                                    &g.data()[i * mn..],
                                    1,
                                    d.n as isize,
                                    &av.data()[i * mk..],
                                    d.k as isize,
                                    1,
                                    beta,
                                    dst,
                                    d.k as isize,
                                    1,
                                );
                            } else {
                                // dB (k x n) = A^T (k x m) * dC (m x n)
                                T::gemm(
                                    d.k,
                                    d.m,
                                    d.n,
                                    T::one(),
                                    &av.data()[i * mk..],
                                    1,
                                    d.k as isize,
                                    &g.data()[i * mn..],
                                    d.n as isize,
                                    1,
                                    beta,
                                    dst,
                                    d.n as isize,
                                    1,
                                );
                            }
                        }
                        accumulate(&mut grads[*b], Tensor::new(bv.shape().to_vec(), gb).expect("gb"));
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), &g, spec, wants(*x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads[*x], dx);
                    }
                    if wants(*w) {
                        accumulate(&mut grads[*w], dw);
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            accumulate(&mut grads[*b], db);
                        }
                    }
                }
                Op::AvgPool { src, k } => accumulate(&mut grads[*src], kernels::avg_pool_backward(&g, *k)),
                Op::Resize { src } => {
                    let s = val(*src).shape();
                    let r = s.len();
                    accumulate(&mut grads[*src], kernels::resize_bilinear_backward(&g, s[r - 2], s[r - 1]));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = *y.shape().last().expect("softmax rank");
                    let mut ga = vec![T::zero(); y.len()];
                    for ((gr, yr), out) in g.data().chunks(c).zip(y.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(y.shape().to_vec(), ga).expect("softmax grad"));
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let c = *y.shape().last().expect("log_softmax rank");
                    let mut ga = vec![T::zero(); y.len()];
                    for ((gr, yr), out) in g.data().chunks(c).zip(y.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: T = gr.iter().copied().sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    accumulate(&mut grads[*a], Tensor::new(y.shape().to_vec(), ga).expect("log_softmax grad"));
                }
                Op::BceWithLogits { src, target } => {
                    let x = val(*src);
                    let scale = g.item() / T::from_usize_lossy(x.len().max(1));
                    let ga = x.zip_map(target, |xv, t| (sigmoid(xv) - t) * scale);
                    accumulate(&mut grads[*src], ga);
                }
                Op::CrossEntropy { src, targets } => {
                    let x = val(*src);
                    let c = x.shape()[1];
                    let scale = g.item() / T::from_usize_lossy(targets.len().max(1));
                    let mut ga = vec![T::zero(); x.len()];
                    for (r, (row, out)) in x.data().chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                        let p = softmax_row(row);
                        for (j, (o, pj)) in out.iter_mut().zip(p).enumerate() {
                            let hot = if j == targets[r] { T::one() } else { T::zero() };
                            *o = (pj - hot) * scale;
                        }
                    }
                    accumulate(&mut grads[*src], Tensor::new(x.shape().to_vec(), ga).expect("ce grad"));
                }
            }
        }
        Gradients { grads }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); row.len()];
    softmax_into(row, &mut out);
    out
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - m;
    }
    T::exp_in_place(out);
    let s: T = out.iter().copied().sum();
    let inv = T::one() / s;
    out.iter_mut().for_each(|o| *o *= inv);
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); row.len()];
    log_softmax_into(row, &mut out);
    out
}

fn log_softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, out: Tensor<T>, op: Op<T>) -> Self {
        self.graph.derived(out, op, &[self.id])
    }

    fn binary(self, other: Self, f: impl Fn(T, T) -> T, op: Op<T>) -> Self {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
        let out = kernels::broadcast_binary(&self.value(), &other.value(), f);
        self.graph.derived(out, op, &[self.id, other.id])
    }

    pub fn add(self, other: Self) -> Self {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Self) -> Self {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, c: T) -> Self {
        let out = self.value().map(|v| v * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Self {
        let out = self.value().map(|v| v + c);
        self.unary(out, Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Self {
        let out = self.value().map(|v| v.max(T::zero()));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Self {
        let out = self.value().map(sigmoid);
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Self {
        let out = self.value().map(|v| v.exp());
        self.unary(out, Op::Exp(self.id))
    }

    pub fn ln(self) -> Self {
        let out = self.value().map(|v| v.ln());
        self.unary(out, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Self {
        let out = self.value().map(|v| v.sqrt());
        self.unary(out, Op::Sqrt(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let out = (*self.value()).clone().reshape(shape).expect("reshape element count");
        self.unary(out, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Self {
        let out = self.value().permute(perm);
        self.unary(out, Op::Permute(self.id, perm.to_vec()))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let out = self.value().narrow(axis, start, len);
        self.unary(out, Op::Narrow { src: self.id, axis, start })
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Self {
        let v = self.value();
        let (outer, dim, inner) = axis_dims(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &v.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.unary(Tensor::new(shape, out).expect("sum_axis"), Op::SumAxis { src: self.id, axis })
    }

    pub fn mean_axis(self, axis: usize) -> Self {
        let n = self.shape()[axis];
        self.sum_axis(axis).scale(T::one() / T::from_usize_lossy(n))
    }

    /// Maximum over `axis`, removing it. Ties route the gradient to the first maximum.
    pub fn max_axis(self, axis: usize) -> Self {
        let v = self.value();
        let (outer, dim, inner) = axis_dims(v.shape(), axis);
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &v.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (i, &x) in src.iter().enumerate() {
                    if x > out[o * inner + i] {
                        out[o * inner + i] = x;
                        argmax[o * inner + i] = d;
                    }
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.unary(Tensor::new(shape, out).expect("max_axis"), Op::MaxAxis { src: self.id, axis, argmax })
    }

    pub fn sum(self) -> Self {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_usize_lossy(n.max(1)))
    }

    fn matmul_impl(self, other: Self, trans_b: bool) -> Self {
        let (av, bv) = (self.value(), other.value());
        let d = matmul_dims(av.shape(), bv.shape(), trans_b);
        let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
        let b_stride = if d.b_batched { kn } else { 0 };
        let (rsb, csb) = if trans_b { (1, d.k as isize) } else { (d.n as isize, 1) };
        let mut out = vec![T::zero(); d.batch * mn];
        for i in 0..d.batch {
            T::gemm(
                d.m,
                d.k,
                d.n,
                T::one(),
                &av.data()[i * mk..],
                d.k as isize,
                1,
                &bv.data()[i * b_stride..],
                rsb,
                csb,
                T::zero(),
                &mut out[i * mn..],
                d.n as isize,
                1,
            );
        }
        let shape = if av.ndim() == 3 { vec![d.batch, d.m, d.n] } else { vec![d.m, d.n] };
        self.graph.derived(
            Tensor::new(shape, out).expect("matmul"),
            Op::MatMul { a: self.id, b: other.id, trans_b },
            &[self.id, other.id],
        )
    }

    /// `self @ other`; rank 2 or batched rank 3 (a rank-2 rhs is shared across the batch).
    pub fn matmul(self, other: Self) -> Self {
        self.matmul_impl(other, false)
    }

    /// `self @ other^T` over the last two axes.
    pub fn matmul_t(self, other: Self) -> Self {
        self.matmul_impl(other, true)
    }

    /// 2-D convolution of an NCHW batch.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, spec: Conv2dSpec) -> Self {
        let b_val = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&self.value(), &weight.value(), b_val.as_deref(), &spec);
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        self.graph.derived(out, Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), spec }, &parents)
    }

    pub fn avg_pool(self, k: usize) -> Self {
        if k == 1 {
            return self;
        }
        let out = kernels::avg_pool_forward(&self.value(), k);
        self.unary(out, Op::AvgPool { src: self.id, k })
    }

    /// Bilinear resize of the last two axes.
    pub fn resize(self, out_h: usize, out_w: usize) -> Self {
        let out = kernels::resize_bilinear_forward(&self.value(), out_h, out_w);
        self.unary(out, Op::Resize { src: self.id })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Self {
        let v = self.value();
        let c = *v.shape().last().expect("softmax on scalar");
        let mut data = vec![T::zero(); v.len()];
        for (row, out) in v.data().chunks(c).zip(data.chunks_mut(c)) {
            softmax_into(row, out);
        }
        self.unary(Tensor::new(v.shape().to_vec(), data).expect("softmax"), Op::Softmax(self.id))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Self {
        let v = self.value();
        let c = *v.shape().last().expect("log_softmax on scalar");
        let mut data = vec![T::zero(); v.len()];
        for (row, out) in v.data().chunks(c).zip(data.chunks_mut(c)) {
            log_softmax_into(row, out);
        }
        self.unary(Tensor::new(v.shape().to_vec(), data).expect("log_softmax"), Op::LogSoftmax(self.id))
    }

    /// Mean binary cross entropy between `sigmoid(self)` and `target`, computed stably from logits.
    pub fn bce_with_logits(self, target: Rc<Tensor<T>>) -> Self {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "bce target shape");
        let total: T = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&xv, &t)| xv.max(T::zero()) - xv * t + (T::one() + (-xv.abs()).exp()).ln())
            .sum();
        let out = Tensor::scalar(total / T::from_usize_lossy(x.len().max(1)));
        self.unary(out, Op::BceWithLogits { src: self.id, target })
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of `self` (rows x classes).
    pub fn cross_entropy(self, targets: &[usize]) -> Self {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "cross_entropy expects rows x classes");
        assert_eq!(x.shape()[0], targets.len(), "one target per row");
        let c = x.shape()[1];
        let mut total = T::zero();
        for (row, &t) in x.data().chunks(c).zip(targets) {
            assert!(t < c, "target {t} out of range for {c} classes");
            total -= log_softmax_row(row)[t];
        }
        let out = Tensor::scalar(total / T::from_usize_lossy(targets.len().max(1)));
        self.unary(out, Op::CrossEntropy { src: self.id, targets: targets.to_vec() })
    }
}

macro_rules! var_binop {
    ($tr:ident, $method:ident) => {
        impl<'g, T: Scalar> std::ops::$tr for Var<'g, T> {
            type Output = Var<'g, T>;
            fn $method(self, rhs: Self) -> Self::Output {
                Var::$method(self, rhs)
            }
        }
    };
}

var_binop!(Add, add);
var_binop!(Sub, sub);
var_binop!(Mul, mul);
var_binop!(Div, div);

impl<'g, T: Scalar> std::ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        self.scale(-T::one())
    }
}
