//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes a new
//! node whose parents already exist, so creation order is a topological order
//! and [`Graph::backward`] simply walks the node list in reverse. That makes
//! gradient accumulation order a pure function of how the graph was built.
//!
//! Parameters are leaves registered under a name; registering the same name
//! twice returns the existing node, so one graph can hold a whole mini-batch
//! of forward passes that share weights.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probability floor used by [`Graph::nll`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
}

impl Elementwise {
    pub fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            Elementwise::Relu | Elementwise::Tanh | Elementwise::Sigmoid => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Relu => "relu",
            Elementwise::Tanh => "tanh",
            Elementwise::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    MatMul(NodeId, NodeId),
    Binary {
        kind: Elementwise,
        lhs: NodeId,
        rhs: NodeId,
        broadcast: bool,
    },
    Unary {
        kind: Elementwise,
        input: NodeId,
    },
    Softmax(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
    Sum(NodeId),
    Scale(NodeId, f64),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Unfold {
        input: NodeId,
        width: usize,
        left: usize,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Nll {
        probs: NodeId,
        target: usize,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Binary { kind, .. } | Op::Unary { kind, .. } => kind.name(),
            Op::Softmax(_) => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Embedding { .. } => "embedding",
            Op::Unfold { .. } => "unfold",
            Op::MaxPool { .. } => "max_pool",
            Op::Nll { .. } => "nll",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) => vec![*a, *b],
            Op::Binary { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::Unary { input, .. }
            | Op::Softmax(input)
            | Op::Slice { input, .. }
            | Op::Reshape(input)
            | Op::Sum(input)
            | Op::Scale(input, _)
            | Op::Unfold { input, .. }
            | Op::MaxPool { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::Nll { probs, .. } => vec![*probs],
        }
    }
}

/// One recorded value with its producing operation.
#[derive(Debug, Clone)]
pub struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    grad: Option<Tensor<T>>,
}

impl<T: Real> Node<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn op_tag(&self) -> &'static str {
        self.op.tag()
    }

    pub fn parents(&self) -> Vec<NodeId> {
        self.op.parents()
    }

    /// Name of a parameter leaf.
    pub fn param_name(&self) -> Option<&str> {
        match &self.op {
            Op::Param(name) => Some(name),
            _ => None,
        }
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` when no
    /// gradient reached this node.
    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }
}

/// Gradients of a scalar loss, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real = f32>(BTreeMap<String, Tensor<T>>);

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.0
    }
}

impl<T: Real> FromIterator<(String, Tensor<T>)> for Gradients<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Gradients(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, NodeId>,
    tanh_grad_fault: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            tanh_grad_fault: false,
        }
    }

    /// Test hook: scales every tanh gradient by 0.5 so verification
    /// harnesses can prove they detect a broken derivative.
    pub fn set_tanh_grad_fault(&mut self, enabled: bool) {
        self.tanh_grad_fault = enabled;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Trainable leaf. A name already registered returns its existing node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(value.clone(), Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Applies a pointwise operation. Binary operations accept equal shapes,
    /// or a vector right-hand side broadcast along the last axis.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(Error::Contract(format!(
                "{} takes {} input(s), got {}",
                kind.name(),
                kind.arity(),
                inputs.len()
            )));
        }
        if kind.arity() == 1 {
            let input = inputs[0];
            let value = self.value(input).map(|x| match kind {
                Elementwise::Relu => {
                    if x > T::zero() {
                        x
                    } else {
                        T::zero()
                    }
                }
                Elementwise::Tanh => x.tanh(),
                _ => sigmoid(x),
            });
            return Ok(self.push(value, Op::Unary { kind, input }));
        }

        let (lhs, rhs) = (inputs[0], inputs[1]);
        let (lv, rv) = (self.value(lhs), self.value(rhs));
        let broadcast = if lv.shape() == rv.shape() {
            false
        } else if rv.ndim() == 1 && rv.len() == lv.cols() {
            true
        } else {
            return Err(Error::dim(
                kind.name(),
                format!("incompatible shapes {:?} and {:?}", lv.shape(), rv.shape()),
            ));
        };
        let f = |a: T, b: T| match kind {
            Elementwise::Add => a + b,
            Elementwise::Sub => a - b,
            _ => a * b,
        };
        let r = rv.data();
        let n = r.len();
        let data = lv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, r[if broadcast { i % n } else { i }]))
            .collect();
        let value = Tensor::new(lv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                lhs,
                rhs,
                broadcast,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Elementwise::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Elementwise::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Elementwise::Mul, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.elementwise(Elementwise::Relu, &[a])
            .expect("unary arity")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.elementwise(Elementwise::Tanh, &[a])
            .expect("unary arity")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.elementwise(Elementwise::Sigmoid, &[a])
            .expect("unary arity")
    }

    /// Numerically stable softmax of a vector.
    pub fn softmax(&mut self, v: NodeId) -> Result<NodeId> {
        let vv = self.value(v);
        if vv.ndim() != 1 {
            return Err(Error::dim(
                "softmax",
                format!("expected a vector, got shape {:?}", vv.shape()),
            ));
        }
        let value = Tensor::vector(kernels::softmax(vv.data())?)?;
        Ok(self.push(value, Op::Softmax(v)))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        let mut along = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("shape {s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            along += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * along * inner);
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = along;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(input);
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { input, axis, start }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let f = T::lit(factor);
        let value = self.value(input).map(|x| x * f);
        self.push(value, Op::Scale(input, factor))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, scalars: &[NodeId]) -> Result<NodeId> {
        if scalars.is_empty() {
            return Err(Error::Contract("mean of no values".into()));
        }
        let stacked = self.concat(scalars, 0)?;
        let total = self.sum(stacked);
        Ok(self.scale(total, 1.0 / scalars.len() as f64))
    }

    /// Row lookup into a `[V×d]` table. Id 0 is padding: it yields a zero row
    /// and receives no gradient, so the padding row never moves.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::dim(
                "embedding",
                format!("table must be 2-D, got {:?}", t.shape()),
            ));
        }
        if ids.is_empty() {
            return Err(Error::dim("embedding", "empty id list"));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { id, bound: v });
            }
            if id == 0 {
                data.extend(std::iter::repeat_n(T::zero(), d));
            } else {
                data.extend_from_slice(t.row(id));
            }
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sliding windows over the rows of `[m×d]`: output row `i` is the
    /// concatenation of input rows `i-left .. i-left+width`, with zero rows
    /// outside `[0, m)`. Output shape is `[m × width·d]`.
    pub fn unfold(&mut self, input: NodeId, width: usize, left: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.ndim() != 2 {
            return Err(Error::dim(
                "unfold",
                format!("expected a matrix, got {:?}", x.shape()),
            ));
        }
        if width == 0 || left >= width {
            return Err(Error::config("width", format!("width {width} with left offset {left}")));
        }
        let (m, d) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![T::zero(); m * width * d];
        for i in 0..m {
            for j in 0..width {
                let src = i as isize - left as isize + j as isize;
                if src >= 0 && (src as usize) < m {
                    let dst = i * width * d + j * d;
                    data[dst..dst + d].copy_from_slice(x.row(src as usize));
                }
            }
        }
        let value = Tensor::new(vec![m, width * d], data)?;
        Ok(self.push(value, Op::Unfold { input, width, left }))
    }

    /// Max over row windows `[j·stride, j·stride+pool)` (clipped), per column.
    /// Ties resolve to the earliest row.
    pub fn max_pool(&mut self, input: NodeId, pool: usize, stride: usize) -> Result<NodeId> {
        if pool == 0 || stride == 0 {
            return Err(Error::config("pool", "pool and stride must be >= 1"));
        }
        let x = self.value(input);
        if x.ndim() != 2 {
            return Err(Error::dim(
                "max_pool",
                format!("expected a matrix, got {:?}", x.shape()),
            ));
        }
        let (m, f) = (x.shape()[0], x.shape()[1]);
        let steps = m.div_ceil(stride);
        let mut data = Vec::with_capacity(steps * f);
        let mut argmax = Vec::with_capacity(steps * f);
        for j in 0..steps {
            let lo = j * stride;
            let hi = (lo + pool).min(m);
            for c in 0..f {
                let mut best = lo * f + c;
                for r in lo + 1..hi {
                    if x.data()[r * f + c] > x.data()[best] {
                        best = r * f + c;
                    }
                }
                data.push(x.data()[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![steps, f], data)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    /// Negative log-likelihood `-ln(max(p[target], 1e-12))` of a probability vector.
    pub fn nll(&mut self, probs: NodeId, target: usize) -> Result<NodeId> {
        let p = self.value(probs);
        if p.ndim() != 1 {
            return Err(Error::dim("nll", format!("expected a vector, got {:?}", p.shape())));
        }
        if target >= p.len() {
            return Err(Error::Contract(format!(
                "gold class {target} out of range for {} classes",
                p.len()
            )));
        }
        let v = p.data()[target].max(T::lit(PROB_FLOOR));
        let value = Tensor::scalar(-v.ln());
        Ok(self.push(value, Op::Nll { probs, target }))
    }

    /// Back-propagates from a scalar `loss` and returns the gradient of every
    /// registered parameter. Parameters the loss does not reach get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(self.value(loss).shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &upstream);
            self.nodes[i].grad = Some(upstream);
            for (parent, g) in contributions {
                let slot = &mut self.nodes[parent.0].grad;
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, &id) in &self.params {
            let g = self.nodes[id.0]
                .grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(id).shape().to_vec()));
            out.insert(name.clone(), g);
        }
        Ok(Gradients(out))
    }

    /// Gradient contributions of node `i` to each of its parents.
    fn local_grads(&self, i: usize, up: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let dy = up.data();
        match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * n];
                kernels::matmul_nt(dy, bv.data(), &mut da, m, n, k);
                kernels::matmul_tn(av.data(), dy, &mut db, m, k, n);
                vec![
                    (*a, tensor_like(av, da)),
                    (*b, tensor_like(bv, db)),
                ]
            }
            Op::Binary {
                kind,
                lhs,
                rhs,
                broadcast,
            } => {
                let (lv, rv) = (self.value(*lhs), self.value(*rhs));
                let n = rv.len();
                let ri = |i: usize| if *broadcast { i % n } else { i };
                let (dl, dr): (Vec<T>, Vec<T>) = match kind {
                    Elementwise::Add => (dy.to_vec(), dy.to_vec()),
                    Elementwise::Sub => (dy.to_vec(), dy.iter().map(|&g| -g).collect()),
                    _ => (
                        dy.iter()
                            .enumerate()
                            .map(|(i, &g)| g * rv.data()[ri(i)])
                            .collect(),
                        dy.iter()
                            .zip(lv.data())
                            .map(|(&g, &l)| g * l)
                            .collect(),
                    ),
                };
                let dr = if *broadcast {
                    let mut acc = vec![T::zero(); n];
                    for (i, g) in dr.into_iter().enumerate() {
                        acc[i % n] = acc[i % n] + g;
                    }
                    acc
                } else {
                    dr
                };
                vec![(*lhs, tensor_like(lv, dl)), (*rhs, tensor_like(rv, dr))]
            }
            Op::Unary { kind, input } => {
                let one = T::one();
                let dx = dy
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &y)| match kind {
                        Elementwise::Relu => {
                            if y > T::zero() {
                                g
                            } else {
                                T::zero()
                            }
                        }
                        Elementwise::Tanh => {
                            let d = g * (one - y * y);
                            if self.tanh_grad_fault {
                                d * T::lit(0.5)
                            } else {
                                d
                            }
                        }
                        _ => g * y * (one - y),
                    })
                    .collect();
                vec![(*input, tensor_like(y, dx))]
            }
            Op::Softmax(input) => {
                let dot: T = dy.iter().zip(y.data()).map(|(&g, &p)| g * p).sum();
                let dx = dy
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &p)| p * (g - dot))
                    .collect();
                vec![(*input, tensor_like(y, dx))]
            }
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for &id in inputs {
                    let v = self.value(id);
                    let chunk = v.shape()[*axis] * inner;
                    let mut g = Vec::with_capacity(v.len());
                    for o in 0..outer {
                        let base = o * row + offset;
                        g.extend_from_slice(&dy[base..base + chunk]);
                    }
                    offset += chunk;
                    out.push((id, tensor_like(v, g)));
                }
                out
            }
            Op::Slice { input, axis, start } => {
                let x = self.value(*input);
                let shape = x.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let width = y.shape()[*axis] * inner;
                let mut g = vec![T::zero(); x.len()];
                for o in 0..outer {
                    let dst = o * shape[*axis] * inner + start * inner;
                    g[dst..dst + width].copy_from_slice(&dy[o * width..(o + 1) * width]);
                }
                vec![(*input, tensor_like(x, g))]
            }
            Op::Reshape(input) => {
                let x = self.value(*input);
                vec![(*input, tensor_like(x, dy.to_vec()))]
            }
            Op::Sum(input) => {
                let x = self.value(*input);
                vec![(*input, Tensor::full(x.shape().to_vec(), dy[0]))]
            }
            Op::Scale(input, factor) => {
                let f = T::lit(*factor);
                vec![(*input, up.map(|g| g * f))]
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut g = vec![T::zero(); t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    if id == 0 {
                        continue;
                    }
                    for c in 0..d {
                        g[id * d + c] = g[id * d + c] + dy[r * d + c];
                    }
                }
                vec![(*table, tensor_like(t, g))]
            }
            Op::Unfold { input, width, left } => {
                let x = self.value(*input);
                let (m, d) = (x.shape()[0], x.shape()[1]);
                let mut g = vec![T::zero(); x.len()];
                for i in 0..m {
                    for j in 0..*width {
                        let src = i as isize - *left as isize + j as isize;
                        if src >= 0 && (src as usize) < m {
                            let s = src as usize * d;
                            let o = i * width * d + j * d;
                            for c in 0..d {
                                g[s + c] = g[s + c] + dy[o + c];
                            }
                        }
                    }
                }
                vec![(*input, tensor_like(x, g))]
            }
            Op::MaxPool { input, argmax } => {
                let x = self.value(*input);
                let mut g = vec![T::zero(); x.len()];
                for (k, &src) in argmax.iter().enumerate() {
                    g[src] = g[src] + dy[k];
                }
                vec![(*input, tensor_like(x, g))]
            }
            Op::Nll { probs, target } => {
                let p = self.value(*probs);
                let mut g = vec![T::zero(); p.len()];
                let pt = p.data()[*target];
                if pt > T::lit(PROB_FLOOR) {
                    g[*target] = -dy[0] / pt;
                }
                vec![(*probs, tensor_like(p, g))]
            }
        }
    }
}

fn tensor_like<T: Real>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(like.shape().to_vec(), data).expect("gradient matches value shape")
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Plain dense kernels shared by forward and backward passes.
pub(crate) mod kernels {
    use crate::error::{Error, Result};
    use crate::tensor::Real;

    /// `out[m×n] += a[m×k] · b[k×n]`
    pub fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = a[i * k + p];
                if s == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + s * bv;
                }
            }
        }
    }

    /// `out[m×k] += a[m×n] · b[k×n]ᵀ`
    pub fn matmul_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let dot: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                out[i * k + p] = out[i * k + p] + dot;
            }
        }
    }

    /// `out[k×n] += a[m×k]ᵀ · b[m×n]`
    pub fn matmul_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let s = a[i * k + p];
                if s == T::zero() {
                    continue;
                }
                let row = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + s * bv;
                }
            }
        }
    }

    pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
        if v.is_empty() {
            return Err(Error::dim("softmax", "empty input"));
        }
        let max = v.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }
}

/// Softmax of a plain slice, outside any graph.
pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    kernels::softmax(v)
}
