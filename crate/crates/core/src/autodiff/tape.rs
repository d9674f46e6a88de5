//! Reverse-mode tape. Every forward primitive appends a node holding its
//! value and provenance; [`Tape::backward`] replays the nodes in reverse.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::params::ParamStore;
use super::real::{lit, Real};
use super::tensor::{self, axis_split, ConvGeom, MatmulDims, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    MatMul(usize, usize, MatmulDims),
    Abs(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    LeakyRelu(usize, F),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    LogSumExp(usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    MaxAxis(usize, usize, Vec<usize>),
    SqNorm(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    BroadcastTo(usize),
    GatherRows(usize, Vec<Option<usize>>),
    Take(usize, Vec<usize>),
    Conv2d(usize, usize, ConvGeom),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Records a computation graph. Nodes are appended in evaluation order, so
/// the graph is acyclic by construction.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    bindings: RefCell<HashMap<String, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(Tensor::scalar(value))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_, F> {
        self.constant(Tensor::zeros(shape))
    }

    /// Binds a named parameter as a gradient-tracked leaf. Asking for the
    /// same name twice returns the same leaf.
    pub fn param<'t>(&'t self, store: &ParamStore<F>, name: &str) -> Result<Var<'t, F>> {
        if let Some(&id) = self.bindings.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let value = store
            .value(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?
            .clone();
        let var = self.leaf(value, true);
        self.bindings.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    pub fn value(&self, v: Var<'_, F>) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn grad(&self, v: Var<'_, F>) -> Option<Tensor<F>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        let nodes = self.nodes.borrow();
        for (name, &id) in self.bindings.borrow().iter() {
            if let (Some(g), Some(p)) = (nodes[id].grad.as_ref(), store.get_mut(name)) {
                p.grad.add_assign(g);
            }
        }
    }

    /// Names of parameters bound on this tape.
    pub fn bound_params(&self) -> Vec<String> {
        let mut names: Vec<String> = self.bindings.borrow().keys().cloned().collect();
        names.sort();
        names
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, x: usize, op: Op<F>, f: impl Fn(F) -> F) -> Var<'_, F> {
        let out = self.nodes.borrow()[x].value.map(f);
        let rg = self.needs(&[x]);
        self.push(out, op, rg)
    }

    fn binary(
        &self,
        name: &'static str,
        a: usize,
        b: usize,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var<'_, F>> {
        let out = {
            let nodes = self.nodes.borrow();
            tensor::broadcast_binary(name, &nodes[a].value, &nodes[b].value, f)?
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// Accumulates gradients from the scalar `root` into every reachable
    /// node that requires them. Calling it twice adds the gradients twice.
    pub fn backward(&self, root: Var<'_, F>) -> Result<()> {
        let grads = {
            let nodes = self.nodes.borrow();
            let root_shape = nodes[root.id].value.shape();
            if !root_shape.is_empty() {
                return Err(AutodiffError::NonScalarRoot(root_shape.to_vec()));
            }
            let mut adj: Vec<Option<Tensor<F>>> = vec![None; root.id + 1];
            adj[root.id] = Some(Tensor::scalar(F::one()));
            let mut done = Vec::new();
            for id in (0..=root.id).rev() {
                let Some(g) = adj[id].take() else { continue };
                if !nodes[id].requires_grad {
                    continue;
                }
                propagate(&nodes, id, &g, &mut adj);
                done.push((id, g));
            }
            done
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in grads {
            match nodes[id].grad.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => nodes[id].grad = Some(g),
            }
        }
        Ok(())
    }

    /// Clears stored gradients on every node.
    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }
}

fn accumulate<F: Real>(adj: &mut [Option<Tensor<F>>], id: usize, g: Tensor<F>) {
    match adj[id].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => adj[id] = Some(g),
    }
}

fn propagate<F: Real>(nodes: &[Node<F>], id: usize, g: &Tensor<F>, adj: &mut [Option<Tensor<F>>]) {
    let node = &nodes[id];
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sub = matches!(node.op, Op::Sub(..));
            if rg(*a) {
                accumulate(adj, *a, tensor::reduce_to(g, val(*a).shape()));
            }
            if rg(*b) {
                let mut gb = tensor::reduce_to(g, val(*b).shape());
                if sub {
                    gb = gb.map(|x| -x);
                }
                accumulate(adj, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ga, gb) = tensor::broadcast_binary_backward(
                g,
                val(*a),
                val(*b),
                (rg(*a), rg(*b)),
                |g, _, y| g * y,
                |g, x, _| g * x,
            );
            if let Some(t) = ga {
                accumulate(adj, *a, t);
            }
            if let Some(t) = gb {
                accumulate(adj, *b, t);
            }
        }
        Op::Div(a, b) => {
            let (ga, gb) = tensor::broadcast_binary_backward(
                g,
                val(*a),
                val(*b),
                (rg(*a), rg(*b)),
                |g, _, y| g / y,
                |g, x, y| -g * x / (y * y),
            );
            if let Some(t) = ga {
                accumulate(adj, *a, t);
            }
            if let Some(t) = gb {
                accumulate(adj, *b, t);
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(adj, *a, g.map(|x| x * c));
        }
        Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
        Op::MatMul(a, b, d) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                // ga = g @ b^T
                let mut ga = Tensor::zeros(av.shape());
                tensor::gemm_batched(
                    d.batch,
                    d.m,
                    d.n,
                    d.k,
                    g.data(),
                    false,
                    true,
                    bv.data(),
                    true,
                    d.rhs_batched,
                    ga.data_mut(),
                    true,
                    false,
                );
                accumulate(adj, *a, ga);
            }
            if rg(*b) {
                // gb = a^T @ g (summed over the batch when b is shared)
                let mut gb = Tensor::zeros(bv.shape());
                tensor::gemm_batched(
                    d.batch,
                    d.k,
                    d.m,
                    d.n,
                    av.data(),
                    true,
                    true,
                    g.data(),
                    false,
                    true,
                    gb.data_mut(),
                    d.rhs_batched,
                    false,
                );
                accumulate(adj, *b, gb);
            }
        }
        Op::Abs(a) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &x)| {
                    if x > F::zero() {
                        g
                    } else if x < F::zero() {
                        -g
                    } else {
                        F::zero()
                    }
                })
                .collect();
            accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data).unwrap());
        }
        Op::Exp(a) => accumulate(adj, *a, zip_map(g, y, |g, y| g * y)),
        Op::Log(a) => accumulate(adj, *a, zip_map(g, val(*a), |g, x| g / x)),
        Op::Sqrt(a) => accumulate(adj, *a, zip_map(g, y, |g, y| g / (y + y))),
        Op::Relu(a) => accumulate(
            adj,
            *a,
            zip_map(g, val(*a), |g, x| if x > F::zero() { g } else { F::zero() }),
        ),
        Op::LeakyRelu(a, slope) => {
            let s = *slope;
            accumulate(
                adj,
                *a,
                zip_map(g, val(*a), |g, x| if x > F::zero() { g } else { g * s }),
            )
        }
        Op::Sigmoid(a) => accumulate(adj, *a, zip_map(g, y, |g, y| g * y * (F::one() - y))),
        Op::Tanh(a) => accumulate(adj, *a, zip_map(g, y, |g, y| g * (F::one() - y * y))),
        Op::Softmax(a) => {
            let cols = *y.shape().last().unwrap();
            let mut out = Tensor::zeros(y.shape());
            for ((gr, yr), or) in g
                .data()
                .chunks(cols)
                .zip(y.data().chunks(cols))
                .zip(out.data_mut().chunks_mut(cols))
            {
                let dot: F = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                for ((o, &g), &y) in or.iter_mut().zip(gr).zip(yr) {
                    *o = y * (g - dot);
                }
            }
            accumulate(adj, *a, out);
        }
        Op::LogSumExp(a) => {
            let x = val(*a);
            let cols = *x.shape().last().unwrap();
            let mut out = Tensor::zeros(x.shape());
            for (r, (xr, or)) in x.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)).enumerate() {
                let (lse, gr) = (y.data()[r], g.data()[r]);
                for (o, &x) in or.iter_mut().zip(xr) {
                    *o = gr * (x - lse).exp();
                }
            }
            accumulate(adj, *a, out);
        }
        Op::SumAll(a) => accumulate(adj, *a, Tensor::full(val(*a).shape(), g.item())),
        Op::MeanAll(a) => {
            let x = val(*a);
            let n = lit::<F>(x.numel() as f64);
            accumulate(adj, *a, Tensor::full(x.shape(), g.item() / n));
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let x = val(*a);
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                F::one() / lit::<F>(len as f64)
            } else {
                F::one()
            };
            let mut out = Tensor::zeros(x.shape());
            let od = out.data_mut();
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        od[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            accumulate(adj, *a, out);
        }
        Op::MaxAxis(a, axis, argmax) => {
            let x = val(*a);
            let (_, len, inner) = axis_split(x.shape(), *axis);
            let mut out = Tensor::zeros(x.shape());
            let od = out.data_mut();
            for (r, &k) in argmax.iter().enumerate() {
                let (o, i) = (r / inner, r % inner);
                od[(o * len + k) * inner + i] += g.data()[r];
            }
            accumulate(adj, *a, out);
        }
        Op::SqNorm(a) => {
            let s = g.item() + g.item();
            accumulate(adj, *a, val(*a).map(|x| x * s));
        }
        Op::Concat(inputs, axis) => {
            let (outer, total, inner) = axis_split(g.shape(), *axis);
            let mut start = 0;
            for &inp in inputs {
                let shape = val(inp).shape();
                let len = shape[*axis];
                if rg(inp) {
                    let mut part = Tensor::zeros(shape);
                    let pd = part.data_mut();
                    for o in 0..outer {
                        let src = &g.data()[(o * total + start) * inner..(o * total + start + len) * inner];
                        pd[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                    }
                    accumulate(adj, inp, part);
                }
                start += len;
            }
        }
        Op::Slice(a, axis, start, end) => {
            let x = val(*a);
            let (outer, total, inner) = axis_split(x.shape(), *axis);
            let len = end - start;
            let mut out = Tensor::zeros(x.shape());
            let od = out.data_mut();
            for o in 0..outer {
                let dst = &mut od[(o * total + start) * inner..(o * total + end) * inner];
                dst.copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(adj, *a, out);
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            accumulate(adj, *a, tensor::permute(g, &inverse));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(adj, *a, g.clone().reshaped(&shape).unwrap());
        }
        Op::BroadcastTo(a) => accumulate(adj, *a, tensor::reduce_to(g, val(*a).shape())),
        Op::GatherRows(a, rows) => {
            let x = val(*a);
            let cols = x.shape()[1];
            let mut out = Tensor::zeros(x.shape());
            let od = out.data_mut();
            for (r, src) in rows.iter().enumerate() {
                if let Some(s) = src {
                    for c in 0..cols {
                        od[s * cols + c] += g.data()[r * cols + c];
                    }
                }
            }
            accumulate(adj, *a, out);
        }
        Op::Take(a, idx) => {
            let mut out = Tensor::zeros(val(*a).shape());
            let od = out.data_mut();
            for (k, &i) in idx.iter().enumerate() {
                od[i] += g.data()[k];
            }
            accumulate(adj, *a, out);
        }
        Op::Conv2d(x, w, geo) => {
            let (xv, wv) = (val(*x), val(*w));
            let batch = xv.shape()[0];
            let out_c = wv.shape()[0];
            let patch = geo.c * geo.kh * geo.kw;
            let plane = geo.ho * geo.wo;
            let img = geo.c * geo.h * geo.w;
            let mut cols = vec![F::zero(); patch * plane];
            let mut gx = rg(*x).then(|| Tensor::zeros(xv.shape()));
            let mut gw = rg(*w).then(|| Tensor::zeros(wv.shape()));
            let mut dcols = vec![F::zero(); patch * plane];
            for b in 0..batch {
                let gb = &g.data()[b * out_c * plane..(b + 1) * out_c * plane];
                if let Some(gw) = gw.as_mut() {
                    tensor::im2col(&xv.data()[b * img..(b + 1) * img], geo, &mut cols);
                    // gw += g_b @ cols^T
                    tensor::gemm_batched(1, out_c, plane, patch, gb, false, false, &cols, true, false, gw.data_mut(), false, true);
                }
                if let Some(gx) = gx.as_mut() {
                    // dcols = w^T @ g_b
                    tensor::gemm_batched(1, patch, out_c, plane, wv.data(), true, false, gb, false, false, &mut dcols, false, false);
                    tensor::col2im(&dcols, geo, &mut gx.data_mut()[b * img..(b + 1) * img]);
                }
            }
            if let Some(t) = gx {
                accumulate(adj, *x, t);
            }
            if let Some(t) = gw {
                accumulate(adj, *w, t);
            }
        }
    }
}

fn zip_map<F: Real>(g: &Tensor<F>, x: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(AutodiffError::Invalid {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

impl<'t, F: Real> Var<'t, F> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<F> {
        self.tape
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(self) -> Tensor<F> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// The value of a scalar node.
    pub fn item(self) -> F {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn grad(self) -> Option<Tensor<F>> {
        self.tape.grad(self)
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(self, other: Var<'t, F>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(other);
        self.tape.binary("add", self.id, other.id, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(other);
        self.tape.binary("sub", self.id, other.id, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(other);
        self.tape.binary("mul", self.id, other.id, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(other);
        self.tape.binary("div", self.id, other.id, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Var<'t, F> {
        self.scale(-F::one())
    }

    pub fn add_scalar(self, c: F) -> Var<'t, F> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |x| x + c)
    }

    /// Matrix product. Supports `[.., m, k] @ [k, n]`, vector operands on
    /// either side, and batched `[b, m, k] @ [b, k, n]`.
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(other);
        let tape = self.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (dims, shape) = tensor::matmul_dims(a.shape(), b.shape()).ok_or_else(|| AutodiffError::Shape {
                op: "matmul",
                shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
            })?;
            let mut c = Tensor::zeros(&shape);
            tensor::gemm_batched(
                dims.batch,
                dims.m,
                dims.k,
                dims.n,
                a.data(),
                false,
                true,
                b.data(),
                false,
                dims.rhs_batched,
                c.data_mut(),
                true,
                false,
            );
            (c, dims)
        };
        let rg = tape.needs(&[self.id, other.id]);
        Ok(tape.push(out.0, Op::MatMul(self.id, other.id, out.1), rg))
    }

    pub fn abs(self) -> Var<'t, F> {
        self.tape.unary(self.id, Op::Abs(self.id), |x| x.abs())
    }

    pub fn exp(self) -> Var<'t, F> {
        self.tape.unary(self.id, Op::Exp(self.id), |x| x.exp())
    }

    pub fn ln(self) -> Var<'t, F> {
        self.tape.unary(self.id, Op::Log(self.id), |x| x.ln())
    }

    pub fn sqrt(self) -> Var<'t, F> {
        self.tape.unary(self.id, Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn relu(self) -> Var<'t, F> {
        self.tape.unary(self.id, Op::Relu(self.id), |x| if x > F::zero() { x } else { F::zero() })
    }

    pub fn leaky_relu(self, slope: F) -> Var<'t, F> {
        self.tape
            .unary(self.id, Op::LeakyRelu(self.id, slope), |x| if x > F::zero() { x } else { x * slope })
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), |x| {
            if x >= F::zero() {
                F::one() / (F::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::one() + e)
            }
        })
    }

    pub fn tanh(self) -> Var<'t, F> {
        self.tape.unary(self.id, Op::Tanh(self.id), |x| x.tanh())
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(self) -> Result<Var<'t, F>> {
        let out = {
            let x = self.tape.value(self);
            if x.rank() == 0 {
                return Err(AutodiffError::Shape { op: "softmax", shapes: vec![vec![]] });
            }
            let cols = *x.shape().last().unwrap();
            let mut out = Tensor::zeros(x.shape());
            for (xr, or) in x.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
                let m = xr.iter().copied().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for (o, &v) in or.iter_mut().zip(xr) {
                    *o = (v - m).exp();
                    s += *o;
                }
                or.iter_mut().for_each(|o| *o /= s);
            }
            out
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Softmax(self.id), rg))
    }

    /// `log(sum(exp(x)))` over the last axis, which is removed.
    pub fn logsumexp(self) -> Result<Var<'t, F>> {
        let out = {
            let x = self.tape.value(self);
            if x.rank() == 0 {
                return Err(AutodiffError::Shape { op: "logsumexp", shapes: vec![vec![]] });
            }
            let cols = *x.shape().last().unwrap();
            let data = x
                .data()
                .chunks(cols)
                .map(|r| {
                    let m = r.iter().copied().fold(F::neg_infinity(), F::max);
                    let s: F = r.iter().map(|&v| (v - m).exp()).sum();
                    m + s.ln()
                })
                .collect();
            Tensor::new(x.shape()[..x.rank() - 1].to_vec(), data).unwrap()
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::LogSumExp(self.id), rg))
    }

    pub fn sum(self) -> Var<'t, F> {
        let s: F = self.tape.value(self).data().iter().copied().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), rg)
    }

    pub fn mean(self) -> Var<'t, F> {
        let s = {
            let x = self.tape.value(self);
            let total: F = x.data().iter().copied().sum();
            total / lit::<F>(x.numel() as f64)
        };
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::MeanAll(self.id), rg)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, F>> {
        let out = {
            let x = self.tape.value(self);
            check_axis(if mean { "mean_axis" } else { "sum_axis" }, x.shape(), axis)?;
            let (outer, len, inner) = axis_split(x.shape(), axis);
            let mut data = vec![F::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += x.data()[(o * len + l) * inner + i];
                    }
                }
            }
            if mean {
                let n = lit::<F>(len as f64);
                data.iter_mut().for_each(|v| *v /= n);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, data).unwrap()
        };
        let rg = self.requires_grad();
        let op = if mean { Op::MeanAxis(self.id, axis) } else { Op::SumAxis(self.id, axis) };
        Ok(self.tape.push(out, op, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, F>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, F>> {
        self.reduce_axis(axis, true)
    }

    /// Maximum over `axis`, removing it. Ties route the gradient to the
    /// lowest index.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t, F>> {
        let (out, argmax) = {
            let x = self.tape.value(self);
            check_axis("max_axis", x.shape(), axis)?;
            let (outer, len, inner) = axis_split(x.shape(), axis);
            let mut data = vec![F::neg_infinity(); outer * inner];
            let mut arg = vec![0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let v = x.data()[(o * len + l) * inner + i];
                        if v > data[o * inner + i] || l == 0 {
                            data[o * inner + i] = v;
                            arg[o * inner + i] = l;
                        }
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            (Tensor::new(shape, data).unwrap(), arg)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::MaxAxis(self.id, axis, argmax), rg))
    }

    /// Squared L2 norm of all entries (Frobenius norm squared for matrices).
    pub fn sq_norm(self) -> Var<'t, F> {
        let s: F = self.tape.value(self).data().iter().map(|&x| x * x).sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::SqNorm(self.id), rg)
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, F>> {
        let out = {
            let x = self.tape.value(self);
            check_axis("slice", x.shape(), axis)?;
            if start > end || end > x.shape()[axis] {
                return Err(AutodiffError::Invalid {
                    op: "slice",
                    msg: format!("range {start}..{end} out of bounds for shape {:?} axis {axis}", x.shape()),
                });
            }
            let (outer, total, inner) = axis_split(x.shape(), axis);
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[(o * total + start) * inner..(o * total + end) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data).unwrap()
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Slice(self.id, axis, start, end), rg))
    }

    /// One row of the leading axis, with that axis dropped.
    pub fn index(self, i: usize) -> Result<Var<'t, F>> {
        let shape = self.shape();
        let mut rest = shape.clone();
        rest.remove(0);
        self.slice(0, i, i + 1)?.reshape(&rest)
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, F>> {
        let out = {
            let x = self.tape.value(self);
            let mut seen = vec![false; x.rank()];
            let valid = axes.len() == x.rank()
                && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(AutodiffError::Invalid {
                    op: "permute",
                    msg: format!("axes {axes:?} are not a permutation for shape {:?}", x.shape()),
                });
            }
            tensor::permute(&x, axes)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Permute(self.id, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, F>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(AutodiffError::Shape { op: "transpose", shapes: vec![self.shape()] });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let out = self.tape.value(self).clone().reshaped(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Reshape(self.id), rg))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let out = tensor::broadcast_to(&self.tape.value(self), shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::BroadcastTo(self.id), rg))
    }

    /// Selects rows of a rank-2 tensor; `None` yields a zero row.
    pub fn gather_rows(self, rows: &[Option<usize>]) -> Result<Var<'t, F>> {
        let out = {
            let x = self.tape.value(self);
            if x.rank() != 2 {
                return Err(AutodiffError::Shape { op: "gather_rows", shapes: vec![x.shape().to_vec()] });
            }
            let (n, cols) = (x.shape()[0], x.shape()[1]);
            let mut data = Vec::with_capacity(rows.len() * cols);
            for r in rows {
                match r {
                    Some(i) if *i < n => data.extend_from_slice(x.row(*i)),
                    Some(i) => {
                        return Err(AutodiffError::Invalid {
                            op: "gather_rows",
                            msg: format!("row {i} out of range for {n} rows"),
                        })
                    }
                    None => data.extend(std::iter::repeat(F::zero()).take(cols)),
                }
            }
            Tensor::new(vec![rows.len(), cols], data).unwrap()
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::GatherRows(self.id, rows.to_vec()), rg))
    }

    /// Picks elements by flat row-major index into a rank-1 result.
    pub fn take(self, flat: &[usize]) -> Result<Var<'t, F>> {
        let out = {
            let x = self.tape.value(self);
            let mut data = Vec::with_capacity(flat.len());
            for &i in flat {
                if i >= x.numel() {
                    return Err(AutodiffError::Invalid {
                        op: "take",
                        msg: format!("index {i} out of range for {} elements", x.numel()),
                    });
                }
                data.push(x.data()[i]);
            }
            Tensor::new(vec![flat.len()], data).unwrap()
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Take(self.id, flat.to_vec()), rg))
    }

    /// 2-D convolution of `[b, c, h, w]` by `[o, c, kh, kw]` weights.
    pub fn conv2d(self, weight: Var<'t, F>, stride: usize, pad: usize) -> Result<Var<'t, F>> {
        self.same_tape(weight);
        let tape = self.tape;
        let (out, geo) = {
            let nodes = tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let bad = || AutodiffError::Shape {
                op: "conv2d",
                shapes: vec![x.shape().to_vec(), w.shape().to_vec()],
            };
            if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
                return Err(bad());
            }
            let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let ho = tensor::conv_out_dim(h, kh, stride, pad).ok_or_else(bad)?;
            let wo = tensor::conv_out_dim(wd, kw, stride, pad).ok_or_else(bad)?;
            let geo = ConvGeom { c, h, w: wd, kh, kw, ho, wo, stride, pad };
            let patch = c * kh * kw;
            let plane = ho * wo;
            let mut cols = vec![F::zero(); patch * plane];
            let mut out = Tensor::zeros(&[b, o, ho, wo]);
            let img = c * h * wd;
            for bi in 0..b {
                tensor::im2col(&x.data()[bi * img..(bi + 1) * img], &geo, &mut cols);
                tensor::gemm_batched(
                    1,
                    o,
                    patch,
                    plane,
                    w.data(),
                    false,
                    false,
                    &cols,
                    false,
                    false,
                    &mut out.data_mut()[bi * o * plane..(bi + 1) * o * plane],
                    false,
                    false,
                );
            }
            (out, geo)
        };
        let rg = tape.needs(&[self.id, weight.id]);
        Ok(tape.push(out, Op::Conv2d(self.id, weight.id, geo), rg))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, F: Real>(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
    let first = parts.first().ok_or(AutodiffError::Invalid {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    let tape = first.tape;
    let out = {
        let nodes = tape.nodes.borrow();
        let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.id].value.shape()).collect();
        let base = shapes[0];
        check_axis("concat", base, axis)?;
        let ok = shapes.iter().all(|s| {
            s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b)
        });
        if !ok {
            return Err(AutodiffError::Shape {
                op: "concat",
                shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            });
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (outer, _, inner) = axis_split(base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, s) in parts.iter().zip(&shapes) {
                let len = s[axis];
                data.extend_from_slice(&nodes[p.id].value.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        Tensor::new(shape, data).unwrap()
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    Ok(tape.push(out, Op::Concat(ids, axis), rg))
}

/// Sum of several same-shape (or broadcastable) values.
pub fn sum_all<'t, F: Real>(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let (first, rest) = parts.split_first().ok_or(AutodiffError::Invalid {
        op: "sum_all",
        msg: "no inputs".into(),
    })?;
    rest.iter().try_fold(*first, |acc, &p| acc.add(p))
}
