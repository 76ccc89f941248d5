//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation on a tape. [`Value`] handles index into
//! the tape and stay valid for the lifetime of the graph. Calling
//! [`Value::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every reachable [`Param`].
//!
//! Precision is a graph-level setting: in 32-bit mode every op result is
//! rounded to f32 before being stored, so the numerics match a true f32
//! implementation while keeping a single code path.

mod check;
mod container;
mod nn;
mod optim;

pub use check::finite_difference_check;
pub use container::{read_tensors, write_tensors, ContainerError, DType, NamedTensor};
pub use nn::{Linear, Mlp};
pub use optim::{Adam, AdamW};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    #[inline]
    fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// A named, trainable parameter living outside any graph.
///
/// Gradients accumulate additively across backward passes; callers zero them
/// explicitly between optimizer steps.
#[derive(Clone)]
pub struct Param(Rc<RefCell<ParamInner>>);

pub struct ParamInner {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: &str, shape: &[usize], values: Vec<f64>) -> Param {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            values.len(),
            "param {}: shape {:?} does not match {} values",
            name,
            shape,
            values.len()
        );
        Param(Rc::new(RefCell::new(ParamInner {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            grad: vec![0.0; n],
        })))
    }

    pub fn zeros(name: &str, shape: &[usize]) -> Param {
        let n: usize = shape.iter().product();
        Param::new(name, shape, vec![0.0; n])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(name: &str, shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Param {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Param::new(name, shape, values)
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.borrow().values.clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.0.borrow().grad.clone()
    }

    pub fn set_values(&self, values: &[f64]) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.values.len(), values.len());
        inner.values.copy_from_slice(values);
    }

    pub fn zero_grad(&self) {
        for g in self.0.borrow_mut().grad.iter_mut() {
            *g = 0.0;
        }
    }

    pub fn len(&self) -> usize {
        self.0.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn borrow_mut(&self) -> std::cell::RefMut<'_, ParamInner> {
        self.0.borrow_mut()
    }
}

/// Ordered collection of parameters with stable iteration order.
#[derive(Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, p: Param) -> Param {
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.0.borrow().name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn extend(&mut self, other: &ParamSet) {
        for p in other.iter() {
            self.params.push(p.clone());
        }
    }

    pub fn save(&self, path: &std::path::Path, dtype: DType) -> Result<(), ContainerError> {
        let tensors: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|p| {
                let inner = p.0.borrow();
                NamedTensor {
                    name: inner.name.clone(),
                    shape: inner.shape.clone(),
                    values: inner.values.clone(),
                    dtype,
                }
            })
            .collect();
        write_tensors(path, &tensors)
    }

    /// Loads values into existing params by name. Every param must be present
    /// in the file with a matching shape.
    pub fn load(&self, path: &std::path::Path) -> Result<(), ContainerError> {
        let tensors = read_tensors(path)?;
        for p in &self.params {
            let mut inner = p.0.borrow_mut();
            let t = tensors
                .iter()
                .find(|t| t.name == inner.name)
                .ok_or_else(|| ContainerError::MissingTensor(inner.name.clone()))?;
            if t.shape != inner.shape {
                return Err(ContainerError::ShapeMismatch {
                    name: inner.name.clone(),
                    expected: inner.shape.clone(),
                    found: t.shape.clone(),
                });
            }
            inner.values.copy_from_slice(&t.values);
        }
        Ok(())
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Transpose(usize),
    Reshape(usize),
    Exp(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Sigmoid(usize),
    Elu(usize),
    Neg(usize),
    Scale { src: usize, c: f64 },
    AddScalar { src: usize },
    Sum(usize),
    Mean(usize),
    SumAxis { src: usize, axis: usize },
    MaxAxis { src: usize, argmax: Vec<usize> },
    LayerNorm { src: usize, inv_std: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
    param: Option<Param>,
}

struct GraphInner {
    precision: Precision,
    grad_enabled: Cell<bool>,
    nodes: RefCell<Vec<Node>>,
}

/// A single-threaded computation tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<GraphInner>,
}

/// Handle to a tensor stored on a [`Graph`].
#[derive(Clone)]
pub struct Value {
    graph: Rc<GraphInner>,
    id: usize,
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        write!(f, "Value(id={}, shape={:?})", self.id, nodes[self.id].shape)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// numpy-style broadcast of two shapes, aligned at the trailing axis.
fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            panic!("{}: shapes {:?} and {:?} are not broadcast-compatible", op, a, b);
        }
    }
    out
}

/// Strides into `shape` for iterating an output of `out_shape`; broadcast axes
/// get stride 0.
fn broadcast_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let off = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[off + i] = s;
        }
        s *= shape[i];
    }
    strides
}

struct BcastIter {
    out_shape: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl BcastIter {
    fn new(a: &[usize], b: &[usize], op: &str) -> BcastIter {
        let out_shape = broadcast_shape(a, b, op);
        let sa = broadcast_strides(&out_shape, a);
        let sb = broadcast_strides(&out_shape, b);
        BcastIter { out_shape, sa, sb }
    }

    /// Calls `f(out_idx, a_idx, b_idx)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = numel(&self.out_shape);
        let rank = self.out_shape.len();
        let mut counters = vec![0usize; rank];
        let mut ia = 0usize;
        let mut ib = 0usize;
        for io in 0..n {
            f(io, ia, ib);
            for ax in (0..rank).rev() {
                counters[ax] += 1;
                ia += self.sa[ax];
                ib += self.sb[ax];
                if counters[ax] < self.out_shape[ax] {
                    break;
                }
                counters[ax] = 0;
                ia -= self.sa[ax] * self.out_shape[ax];
                ib -= self.sb[ax] * self.out_shape[ax];
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Graph {
        Graph {
            inner: Rc::new(GraphInner {
                precision,
                grad_enabled: Cell::new(true),
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    pub fn precision(&self) -> Precision {
        self.inner.precision
    }

    pub fn set_grad_enabled(&self, enabled: bool) {
        self.inner.grad_enabled.set(enabled);
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.grad_enabled.get()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    fn push(&self, shape: Vec<usize>, mut values: Vec<f64>, op: Op, needs_grad: bool, param: Option<Param>) -> Value {
        self.inner.precision.round_slice(&mut values);
        let needs_grad = needs_grad && self.inner.grad_enabled.get();
        let op = if needs_grad { op } else { Op::Leaf };
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            values,
            grad: None,
            op,
            needs_grad,
            param: if self.inner.grad_enabled.get() { param } else { None },
        });
        Value {
            graph: Rc::clone(&self.inner),
            id,
        }
    }

    pub fn constant(&self, shape: &[usize], values: &[f64]) -> Value {
        assert_eq!(
            numel(shape),
            values.len(),
            "constant: shape {:?} does not match {} values",
            shape,
            values.len()
        );
        self.push(shape.to_vec(), values.to_vec(), Op::Leaf, false, None)
    }

    pub fn scalar(&self, v: f64) -> Value {
        self.constant(&[1], &[v])
    }

    pub fn zeros(&self, shape: &[usize]) -> Value {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf, false, None)
    }

    /// Leases a parameter into this graph. Backward accumulates into the
    /// parameter's gradient buffer.
    pub fn param(&self, p: &Param) -> Value {
        let (shape, values) = {
            let inner = p.0.borrow();
            (inner.shape.clone(), inner.values.clone())
        };
        self.push(shape, values, Op::Leaf, true, Some(p.clone()))
    }

}

macro_rules! unary_op {
    ($name:ident, $opvar:ident, $fwd:expr) => {
        pub fn $name(&self) -> Value {
            let (shape, values) = {
                let nodes = self.graph.nodes.borrow();
                let n = &nodes[self.id];
                let f = $fwd;
                (n.shape.clone(), n.values.iter().map(|&x| f(x)).collect::<Vec<f64>>())
            };
            self.graph_handle()
                .push(shape, values, Op::$opvar(self.id), self.needs_grad(), None)
        }
    };
}

impl Value {
    fn graph_handle(&self) -> Graph {
        Graph {
            inner: Rc::clone(&self.graph),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].values.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        assert_eq!(n.values.len(), 1, "item: tensor has {} elements", n.values.len());
        n.values[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    fn needs_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    /// Copy of the values as a fresh leaf, cut off from the tape.
    pub fn detach(&self) -> Value {
        let (shape, values) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.values.clone())
        };
        self.graph_handle().push(shape, values, Op::Leaf, false, None)
    }

    fn binary(&self, other: &Value, op_name: &str, f: impl Fn(f64, f64) -> f64, make_op: impl Fn(usize, usize) -> Op) -> Value {
        assert!(
            Rc::ptr_eq(&self.graph, &other.graph),
            "{}: operands belong to different graphs",
            op_name
        );
        let (shape, values, ng) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            if a.shape == b.shape {
                let values: Vec<f64> = a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect();
                (a.shape.clone(), values, a.needs_grad || b.needs_grad)
            } else {
                let it = BcastIter::new(&a.shape, &b.shape, op_name);
                let mut values = vec![0.0; numel(&it.out_shape)];
                it.for_each(|io, ia, ib| values[io] = f(a.values[ia], b.values[ib]));
                (it.out_shape.clone(), values, a.needs_grad || b.needs_grad)
            }
        };
        self.graph_handle()
            .push(shape, values, make_op(self.id, other.id), ng, None)
    }

    pub fn add(&self, other: &Value) -> Value {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Value) -> Value {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Value) -> Value {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Value) -> Value {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn matmul(&self, other: &Value) -> Value {
        assert!(
            Rc::ptr_eq(&self.graph, &other.graph),
            "matmul: operands belong to different graphs"
        );
        let (shape, values, ng) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            assert!(
                a.shape.len() == 2 && b.shape.len() == 2 && a.shape[1] == b.shape[0],
                "matmul: incompatible shapes {:?} and {:?}",
                a.shape,
                b.shape
            );
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut values = vec![0.0; m * n];
            matmul_raw(&a.values, &b.values, m, k, n, &mut values);
            (vec![m, n], values, a.needs_grad || b.needs_grad)
        };
        self.graph_handle()
            .push(shape, values, Op::Matmul(self.id, other.id), ng, None)
    }

    pub fn concat(parts: &[&Value], axis: usize) -> Value {
        assert!(!parts.is_empty(), "concat: no inputs");
        let graph = parts[0].graph_handle();
        let (shape, values, ng) = {
            let nodes = graph.inner.nodes.borrow();
            let first = &nodes[parts[0].id];
            let rank = first.shape.len();
            assert!(axis < rank, "concat: axis {} out of range for rank {}", axis, rank);
            let mut out_shape = first.shape.clone();
            out_shape[axis] = 0;
            let mut ng = false;
            for p in parts {
                let n = &nodes[p.id];
                assert_eq!(n.shape.len(), rank, "concat: rank mismatch {:?} vs {:?}", first.shape, n.shape);
                for (ax, (&da, &db)) in first.shape.iter().zip(&n.shape).enumerate() {
                    if ax != axis {
                        assert_eq!(da, db, "concat: shape mismatch {:?} vs {:?} on axis {}", first.shape, n.shape, ax);
                    }
                }
                out_shape[axis] += n.shape[axis];
                ng |= n.needs_grad;
            }
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let mut values = vec![0.0; numel(&out_shape)];
            let out_block = out_shape[axis] * inner;
            let mut offset = 0usize;
            for p in parts {
                let n = &nodes[p.id];
                let block = n.shape[axis] * inner;
                for o in 0..outer {
                    let src = &n.values[o * block..(o + 1) * block];
                    values[o * out_block + offset..o * out_block + offset + block].copy_from_slice(src);
                }
                offset += block;
            }
            (out_shape, values, ng)
        };
        graph.push(
            shape,
            values,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            ng,
            None,
        )
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Value {
        let (shape, values, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert!(axis < n.shape.len(), "slice: axis {} out of range for shape {:?}", axis, n.shape);
            assert!(
                start + len <= n.shape[axis],
                "slice: range {}..{} out of bounds for shape {:?} on axis {}",
                start,
                start + len,
                n.shape,
                axis
            );
            let outer: usize = n.shape[..axis].iter().product();
            let inner: usize = n.shape[axis + 1..].iter().product();
            let src_block = n.shape[axis] * inner;
            let dst_block = len * inner;
            let mut out_shape = n.shape.clone();
            out_shape[axis] = len;
            let mut values = vec![0.0; outer * dst_block];
            for o in 0..outer {
                let src = &n.values[o * src_block + start * inner..o * src_block + (start + len) * inner];
                values[o * dst_block..(o + 1) * dst_block].copy_from_slice(src);
            }
            (out_shape, values, n.needs_grad)
        };
        self.graph_handle().push(
            shape,
            values,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            ng,
            None,
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Value {
        let (shape, values, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(n.shape.len(), 2, "transpose: expected rank 2, got shape {:?}", n.shape);
            let (m, k) = (n.shape[0], n.shape[1]);
            let mut values = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..k {
                    values[j * m + i] = n.values[i * k + j];
                }
            }
            (vec![k, m], values, n.needs_grad)
        };
        self.graph_handle()
            .push(shape, values, Op::Transpose(self.id), ng, None)
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Value {
        let (values, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(
                numel(&n.shape),
                numel(new_shape),
                "reshape: cannot reshape {:?} to {:?}",
                n.shape,
                new_shape
            );
            (n.values.clone(), n.needs_grad)
        };
        self.graph_handle()
            .push(new_shape.to_vec(), values, Op::Reshape(self.id), ng, None)
    }

    unary_op!(exp, Exp, |x: f64| x.exp());
    unary_op!(sqrt, Sqrt, |x: f64| x.sqrt());
    unary_op!(sin, Sin, |x: f64| x.sin());
    unary_op!(cos, Cos, |x: f64| x.cos());
    unary_op!(sigmoid, Sigmoid, |x: f64| 1.0 / (1.0 + (-x).exp()));
    unary_op!(elu, Elu, |x: f64| if x > 0.0 { x } else { x.exp_m1() });
    unary_op!(neg, Neg, |x: f64| -x);

    pub fn scale(&self, c: f64) -> Value {
        let (shape, values, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.values.iter().map(|&x| x * c).collect(), n.needs_grad)
        };
        self.graph_handle()
            .push(shape, values, Op::Scale { src: self.id, c }, ng, None)
    }

    pub fn add_scalar(&self, c: f64) -> Value {
        let (shape, values, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.values.iter().map(|&x| x + c).collect(), n.needs_grad)
        };
        self.graph_handle()
            .push(shape, values, Op::AddScalar { src: self.id }, ng, None)
    }

    /// x * sigmoid(x)
    pub fn swish(&self) -> Value {
        self.mul(&self.sigmoid())
    }

    pub fn sqr(&self) -> Value {
        self.mul(self)
    }

    pub fn sum(&self) -> Value {
        let (v, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (n.values.iter().sum::<f64>(), n.needs_grad)
        };
        self.graph_handle()
            .push(vec![1], vec![v], Op::Sum(self.id), ng, None)
    }

    pub fn mean(&self) -> Value {
        let (v, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (n.values.iter().sum::<f64>() / n.values.len() as f64, n.needs_grad)
        };
        self.graph_handle()
            .push(vec![1], vec![v], Op::Mean(self.id), ng, None)
    }

    fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, axis_len, inner)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Value {
        let (shape, values, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert!(axis < n.shape.len(), "sum_axis: axis {} out of range for shape {:?}", axis, n.shape);
            let (outer, axis_len, inner) = Self::axis_blocks(&n.shape, axis);
            let mut values = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..axis_len {
                    for i in 0..inner {
                        values[o * inner + i] += n.values[(o * axis_len + a) * inner + i];
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, values, n.needs_grad)
        };
        self.graph_handle()
            .push(shape, values, Op::SumAxis { src: self.id, axis }, ng, None)
    }

    /// Max over one axis; the axis is removed from the shape. Gradient routes
    /// to the (first) argmax element.
    pub fn max_axis(&self, axis: usize) -> Value {
        let (shape, values, argmax, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert!(axis < n.shape.len(), "max_axis: axis {} out of range for shape {:?}", axis, n.shape);
            let (outer, axis_len, inner) = Self::axis_blocks(&n.shape, axis);
            assert!(axis_len > 0, "max_axis: empty axis");
            let mut values = vec![f64::NEG_INFINITY; outer * inner];
            let mut argmax = vec![0usize; outer * inner];
            for o in 0..outer {
                for a in 0..axis_len {
                    for i in 0..inner {
                        let src = (o * axis_len + a) * inner + i;
                        let dst = o * inner + i;
                        if n.values[src] > values[dst] {
                            values[dst] = n.values[src];
                            argmax[dst] = src;
                        }
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, values, argmax, n.needs_grad)
        };
        self.graph_handle().push(
            shape,
            values,
            Op::MaxAxis {
                src: self.id,
                argmax,
            },
            ng,
            None,
        )
    }

    /// Normalization over the last axis: (x - mean) / sqrt(var + eps).
    /// Affine scale/shift are applied by the caller.
    pub fn layer_norm(&self, eps: f64) -> Value {
        let (shape, values, inv_std, ng) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            let rank = n.shape.len();
            assert!(rank >= 1, "layer_norm: scalar input");
            let d = n.shape[rank - 1];
            let rows = n.values.len() / d;
            let mut values = vec![0.0; n.values.len()];
            let mut inv_stds = vec![0.0; rows];
            for r in 0..rows {
                let row = &n.values[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_stds[r] = inv;
                for i in 0..d {
                    values[r * d + i] = (row[i] - mu) * inv;
                }
            }
            (n.shape.clone(), values, inv_stds, n.needs_grad)
        };
        self.graph_handle().push(
            shape,
            values,
            Op::LayerNorm {
                src: self.id,
                inv_std,
            },
            ng,
            None,
        )
    }

    /// Runs the backward pass from this scalar. Gradients accumulate into
    /// every reachable [`Param`].
    pub fn backward(&self) {
        let precision = self.graph.precision;
        let mut nodes = self.graph.nodes.borrow_mut();
        assert_eq!(
            nodes[self.id].values.len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            nodes[self.id].shape
        );
        assert!(nodes[self.id].needs_grad, "backward: node does not require gradients");
        nodes[self.id].grad = Some(vec![1.0]);
        for i in (0..=self.id).rev() {
            if nodes[i].grad.is_none() || !nodes[i].needs_grad {
                continue;
            }
            backprop(&mut nodes, i);
        }
        // write back into parameters
        for node in nodes.iter_mut() {
            if let (Some(p), Some(g)) = (&node.param, &node.grad) {
                let mut inner = p.borrow_mut();
                for (dst, &src) in inner.grad.iter_mut().zip(g.iter()) {
                    *dst = precision.round(*dst + precision.round(src));
                }
            }
        }
    }
}

fn ensure_grad(node: &mut Node) -> &mut Vec<f64> {
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.values.len()]);
    }
    node.grad.as_mut().unwrap()
}

/// Accumulates `g` (shaped `out_shape`) into the gradient of a broadcast
/// operand with shape `shape`, applying `factor(ia, ib_other)`-style weights
/// computed by the caller per element.
fn backprop(nodes: &mut [Node], i: usize) {
    // Split so the current node is readable while parents are mutable.
    let (parents, rest) = nodes.split_at_mut(i);
    let node = &mut rest[0];
    let g = node.grad.as_ref().expect("backprop without gradient").clone();
    let out_shape = node.shape.clone();

    let add_bcast = |parents: &mut [Node], src: usize, other_shape: &[usize], f: &mut dyn FnMut(usize, usize) -> f64| {
        // f(ia, ib) -> local derivative for operand `src` at its index ia,
        // with the other operand index ib.
        let shape_a = parents[src].shape.clone();
        if !parents[src].needs_grad {
            return;
        }
        let it = BcastIter::new(&shape_a, other_shape, "backward");
        let ga = ensure_grad(&mut parents[src]);
        it.for_each(|io, ia, ib| {
            ga[ia] += g[io] * f(ia, ib);
        });
    };

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            let sb = parents[b].shape.clone();
            let sa = parents[a].shape.clone();
            add_bcast(parents, a, &sb, &mut |_, _| 1.0);
            if parents[b].needs_grad {
                let it = BcastIter::new(&sa, &sb, "backward");
                let gb = ensure_grad(&mut parents[b]);
                it.for_each(|io, _, ib| gb[ib] += g[io]);
            }
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            let sb = parents[b].shape.clone();
            let sa = parents[a].shape.clone();
            add_bcast(parents, a, &sb, &mut |_, _| 1.0);
            if parents[b].needs_grad {
                let it = BcastIter::new(&sa, &sb, "backward");
                let gb = ensure_grad(&mut parents[b]);
                it.for_each(|io, _, ib| gb[ib] -= g[io]);
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let bv = parents[b].values.clone();
            let av = parents[a].values.clone();
            let sb = parents[b].shape.clone();
            let sa = parents[a].shape.clone();
            add_bcast(parents, a, &sb, &mut |_, ib| bv[ib]);
            if parents[b].needs_grad {
                let it = BcastIter::new(&sa, &sb, "backward");
                let gb = ensure_grad(&mut parents[b]);
                it.for_each(|io, ia, ib| gb[ib] += g[io] * av[ia]);
            }
        }
        Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            let bv = parents[b].values.clone();
            let av = parents[a].values.clone();
            let sb = parents[b].shape.clone();
            let sa = parents[a].shape.clone();
            add_bcast(parents, a, &sb, &mut |_, ib| 1.0 / bv[ib]);
            if parents[b].needs_grad {
                let it = BcastIter::new(&sa, &sb, "backward");
                let gb = ensure_grad(&mut parents[b]);
                it.for_each(|io, ia, ib| gb[ib] -= g[io] * av[ia] / (bv[ib] * bv[ib]));
            }
        }
        Op::Matmul(a, b) => {
            let (a, b) = (*a, *b);
            let (m, k) = (parents[a].shape[0], parents[a].shape[1]);
            let n = parents[b].shape[1];
            if parents[a].needs_grad {
                // dA = G @ B^T
                let bv = parents[b].values.clone();
                let mut bt = vec![0.0; k * n];
                for kk in 0..k {
                    for j in 0..n {
                        bt[j * k + kk] = bv[kk * n + j];
                    }
                }
                let mut da = vec![0.0; m * k];
                matmul_raw(&g, &bt, m, n, k, &mut da);
                let ga = ensure_grad(&mut parents[a]);
                for (dst, src) in ga.iter_mut().zip(da) {
                    *dst += src;
                }
            }
            if parents[b].needs_grad {
                // dB = A^T @ G
                let av = parents[a].values.clone();
                let mut at = vec![0.0; m * k];
                for i2 in 0..m {
                    for kk in 0..k {
                        at[kk * m + i2] = av[i2 * k + kk];
                    }
                }
                let mut db = vec![0.0; k * n];
                matmul_raw(&at, &g, k, m, n, &mut db);
                let gb = ensure_grad(&mut parents[b]);
                for (dst, src) in gb.iter_mut().zip(db) {
                    *dst += src;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let axis = *axis;
            let parts = parts.clone();
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let out_block = out_shape[axis] * inner;
            let mut offset = 0usize;
            for pid in parts {
                let block = parents[pid].shape[axis] * inner;
                if parents[pid].needs_grad {
                    let gp = ensure_grad(&mut parents[pid]);
                    for o in 0..outer {
                        for j in 0..block {
                            gp[o * block + j] += g[o * out_block + offset + j];
                        }
                    }
                }
                offset += block;
            }
        }
        Op::Slice { src, axis, start } => {
            let (src, axis, start) = (*src, *axis, *start);
            if parents[src].needs_grad {
                let sshape = parents[src].shape.clone();
                let (outer, axis_len, inner) = Value::axis_blocks(&sshape, axis);
                let len = out_shape[axis];
                let gp = ensure_grad(&mut parents[src]);
                for o in 0..outer {
                    for a in 0..len {
                        for j in 0..inner {
                            gp[(o * axis_len + start + a) * inner + j] += g[(o * len + a) * inner + j];
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let a = *a;
            if parents[a].needs_grad {
                let (m, k) = (parents[a].shape[0], parents[a].shape[1]);
                let gp = ensure_grad(&mut parents[a]);
                for i2 in 0..m {
                    for j in 0..k {
                        gp[i2 * k + j] += g[j * m + i2];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            let a = *a;
            if parents[a].needs_grad {
                let gp = ensure_grad(&mut parents[a]);
                for (dst, &src) in gp.iter_mut().zip(g.iter()) {
                    *dst += src;
                }
            }
        }
        Op::Exp(a) => {
            let a = *a;
            let out = node.values.clone();
            if parents[a].needs_grad {
                let gp = ensure_grad(&mut parents[a]);
                for ((dst, &src), &y) in gp.iter_mut().zip(g.iter()).zip(out.iter()) {
                    *dst += src * y;
                }
            }
        }
        Op::Sqrt(a) => {
            let a = *a;
            let out = node.values.clone();
            if parents[a].needs_grad {
                let gp = ensure_grad(&mut parents[a]);
                for ((dst, &src), &y) in gp.iter_mut().zip(g.iter()).zip(out.iter()) {
                    *dst += src * 0.5 / y;
                }
            }
        }
        Op::Sin(a) => {
            let a = *a;
            let xs = parents[a].values.clone();
            if parents[a].needs_grad {
                let gp = ensure_grad(&mut parents[a]);
                for ((dst, &src), &x) in gp.iter_mut().zip(g.iter()).zip(xs.iter()) {
                    *dst += src * x.cos();
                }
            }
        }
        Op::Cos(a) => {
            let a = *a;
            let xs = parents[a].values.clone();
            if parents[a].needs_grad {
                let gp = ensure_grad(&mut parents[a]);
                for ((dst, &src), &x) in gp.iter_mut().zip(g.iter()).zip(xs.iter()) {
                    *dst -= src * x.sin();
                }
            }
        }
        Op::Sigmoid(a) => {
            let a = *a;
            let out = node.values.clone();
            if parents[a].needs_grad {
                let gp = ensure_grad(&mut parents[a]);
                for ((dst, &src), &y) in gp.iter_mut().zip(g.iter()).zip(out.iter()) {
                    *dst += src * y * (1.0 - y);
                }
            }
        }
        Op::Elu(a) => {
            let a = *a;
            let xs = parents[a].values.clone();
            if parents[a].needs_grad {
                let gp = ensure_grad(&mut parents[a]);
                for ((dst, &src), &x) in gp.iter_mut().zip(g.iter()).zip(xs.iter()) {
                    *dst += src * if x > 0.0 { 1.0 } else { x.exp() };
                }
            }
        }
        Op::Neg(a) => {
            let a = *a;
            if parents[a].needs_grad {
                let gp = ensure_grad(&mut parents[a]);
                for (dst, &src) in gp.iter_mut().zip(g.iter()) {
                    *dst -= src;
                }
            }
        }
        Op::Scale { src, c } => {
            let (src, c) = (*src, *c);
            if parents[src].needs_grad {
                let gp = ensure_grad(&mut parents[src]);
                for (dst, &gv) in gp.iter_mut().zip(g.iter()) {
                    *dst += gv * c;
                }
            }
        }
        Op::AddScalar { src } => {
            let src = *src;
            if parents[src].needs_grad {
                let gp = ensure_grad(&mut parents[src]);
                for (dst, &gv) in gp.iter_mut().zip(g.iter()) {
                    *dst += gv;
                }
            }
        }
        Op::Sum(a) => {
            let a = *a;
            if parents[a].needs_grad {
                let gp = ensure_grad(&mut parents[a]);
                for dst in gp.iter_mut() {
                    *dst += g[0];
                }
            }
        }
        Op::Mean(a) => {
            let a = *a;
            if parents[a].needs_grad {
                let n = parents[a].values.len() as f64;
                let gp = ensure_grad(&mut parents[a]);
                for dst in gp.iter_mut() {
                    *dst += g[0] / n;
                }
            }
        }
        Op::SumAxis { src, axis } => {
            let (src, axis) = (*src, *axis);
            if parents[src].needs_grad {
                let sshape = parents[src].shape.clone();
                let (outer, axis_len, inner) = Value::axis_blocks(&sshape, axis);
                let gp = ensure_grad(&mut parents[src]);
                for o in 0..outer {
                    for a in 0..axis_len {
                        for j in 0..inner {
                            gp[(o * axis_len + a) * inner + j] += g[o * inner + j];
                        }
                    }
                }
            }
        }
        Op::MaxAxis { src, argmax } => {
            let src = *src;
            let argmax = argmax.clone();
            if parents[src].needs_grad {
                let gp = ensure_grad(&mut parents[src]);
                for (out_idx, &src_idx) in argmax.iter().enumerate() {
                    gp[src_idx] += g[out_idx];
                }
            }
        }
        Op::LayerNorm { src, inv_std } => {
            let src = *src;
            let inv_std = inv_std.clone();
            let y = node.values.clone();
            if parents[src].needs_grad {
                let d = *parents[src].shape.last().unwrap();
                let rows = y.len() / d;
                let gp = ensure_grad(&mut parents[src]);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                    let inv = inv_std[r];
                    for i2 in 0..d {
                        gp[r * d + i2] += inv * (gr[i2] - mean_g - yr[i2] * mean_gy);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
