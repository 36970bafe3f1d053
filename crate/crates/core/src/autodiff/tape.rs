use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::scalar::{self, Scalar};

use super::tensor::{NodeId, NodeRef, Tensor};
use super::AutodiffError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MatMul,
    Transpose,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    Sin,
    Cos,
    Sum(Option<usize>),
    Mean(Option<usize>),
    Max { argmax: Vec<usize> },
    Softmax(usize),
    LogSoftmax(usize),
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    GatherRows(Vec<usize>),
    Scale(T),
    Power(T),
    Reshape,
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Abs => "abs",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Max { .. } => "max",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows(_) => "gather_rows",
            Op::Scale(_) => "scale",
            Op::Power(_) => "power",
            Op::Reshape => "reshape",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Tensor<T>>,
    out: Tensor<T>,
}

/// Define-by-run recording of differentiable operations.
///
/// Every operation is a method on the tape. Outputs are tracked when at
/// least one input is tracked; purely constant computations never touch the
/// node list. Build a fresh tape per forward pass.
pub struct Tape<T> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a tensor recorded on the differentiated tape; `None` for
    /// untracked tensors and for nodes the root does not depend on.
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.id.0)?.as_deref()
    }

    pub fn get_tensor(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let node = t.node?;
        let g = self.get(t)?;
        Some(Tensor {
            shape: self.shapes[node.id.0].clone(),
            values: Arc::new(g.to_vec()),
            node: None,
        })
    }

    /// Gradient or zeros shaped like `t` (for parameters the loss ignored).
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        self.get(t)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); t.numel()])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.get(id.0).is_some_and(Option::is_some)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

#[inline]
fn bget<T: Copy>(v: &[T], k: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

/// Collapses a gradient to the shape of a (possibly scalar-broadcast) input.
fn unbroadcast<T: Scalar>(g: Vec<T>, input: &Tensor<T>) -> Vec<T> {
    if input.numel() == 1 && g.len() != 1 {
        vec![g.iter().copied().sum()]
    } else {
        g
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a gradient-tracked leaf holding the given values.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        let out = Tensor {
            shape: t.shape.clone(),
            values: Arc::clone(&t.values),
            node: Some(NodeRef { tape: self.id, id }),
        };
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out: out.detach(),
        });
        out
    }

    pub fn var(&self, shape: &[usize], values: Vec<T>) -> Result<Tensor<T>, AutodiffError> {
        Ok(self.leaf(&Tensor::new(shape, values)?))
    }

    fn record(
        &self,
        op: Op<T>,
        inputs: &[&Tensor<T>],
        shape: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Tensor<T>, AutodiffError> {
        let mut tracked = false;
        for t in inputs {
            if let Some(n) = t.node {
                if n.tape != self.id {
                    return Err(AutodiffError::ForeignTensor { op: op.name() });
                }
                tracked = true;
            }
        }
        let out = Tensor {
            shape,
            values: Arc::new(values),
            node: None,
        };
        if !tracked {
            return Ok(out);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            out: out.clone(),
        });
        Ok(Tensor {
            node: Some(NodeRef { tape: self.id, id }),
            ..out
        })
    }

    fn broadcast_shape(
        op: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
    ) -> Result<Vec<usize>, AutodiffError> {
        if a.shape == b.shape {
            Ok(a.shape.clone())
        } else if b.numel() == 1 {
            Ok(a.shape.clone())
        } else if a.numel() == 1 {
            Ok(b.shape.clone())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })
        }
    }

    fn binary(
        &self,
        op: Op<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, AutodiffError> {
        let shape = Self::broadcast_shape(op.name(), a, b)?;
        let n: usize = shape.iter().product();
        let (av, bv) = (a.values(), b.values());
        let values = (0..n).map(|k| f(bget(av, k), bget(bv, k))).collect();
        self.record(op, &[a, b], shape, values)
    }

    fn unary(
        &self,
        op: Op<T>,
        a: &Tensor<T>,
        f: impl Fn(T) -> T,
    ) -> Result<Tensor<T>, AutodiffError> {
        let values = a.values().iter().map(|&x| f(x)).collect();
        self.record(op, &[a], a.shape.clone(), values)
    }

    fn check_axis(op: &'static str, t: &Tensor<T>, axis: usize) -> Result<(), AutodiffError> {
        if axis >= t.rank() {
            Err(AutodiffError::InvalidAxis {
                op,
                axis,
                shape: t.shape.clone(),
            })
        } else {
            Ok(())
        }
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        if let Some(k) = b.values().iter().position(|&x| x == T::zero()) {
            return Err(AutodiffError::Domain {
                op: "div",
                detail: format!("zero divisor at flat index {k}"),
            });
        }
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn neg(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn scale(&self, a: &Tensor<T>, c: T) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn power(&self, a: &Tensor<T>, p: T) -> Result<Tensor<T>, AutodiffError> {
        let integral = p.fract() == T::zero();
        for (k, &x) in a.values().iter().enumerate() {
            if (x < T::zero() && !integral) || (x == T::zero() && p < T::zero()) {
                return Err(AutodiffError::Domain {
                    op: "power",
                    detail: format!("base {x} at flat index {k} with exponent {p}"),
                });
            }
        }
        self.unary(Op::Power(p), a, |x| x.powf(p))
    }

    pub fn exp(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Exp, a, T::exp)
    }

    pub fn log(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        if let Some(k) = a.values().iter().position(|&x| !(x > T::zero())) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("nonpositive value {} at flat index {k}", a.values()[k]),
            });
        }
        self.unary(Op::Log, a, T::ln)
    }

    pub fn softplus(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Softplus, a, scalar::softplus)
    }

    pub fn sigmoid(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Sigmoid, a, scalar::sigmoid)
    }

    pub fn tanh(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Tanh, a, T::tanh)
    }

    pub fn relu(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Relu, a, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn abs(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Abs, a, T::abs)
    }

    pub fn sin(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Sin, a, T::sin)
    }

    pub fn cos(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        self.unary(Op::Cos, a, T::cos)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let values = matmul_raw(a.values(), b.values(), m, k, n);
        self.record(Op::MatMul, &[a, b], vec![m, n], values)
    }

    pub fn transpose(&self, a: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
        if a.rank() != 2 {
            return Err(AutodiffError::InvalidAxis {
                op: "transpose",
                axis: 1,
                shape: a.shape.clone(),
            });
        }
        let (r, c) = (a.shape[0], a.shape[1]);
        let values = transpose_raw(a.values(), r, c);
        self.record(Op::Transpose, &[a], vec![c, r], values)
    }

    pub fn reshape(&self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != a.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        self.record(Op::Reshape, &[a], shape.to_vec(), a.to_vec())
    }

    /// Sum over one axis (dropping it) or over everything (`None`, shape `[]`).
    pub fn sum(&self, a: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>, AutodiffError> {
        match axis {
            None => {
                let s = a.values().iter().copied().sum();
                self.record(Op::Sum(None), &[a], Vec::new(), vec![s])
            }
            Some(ax) => {
                Self::check_axis("sum", a, ax)?;
                let (outer, len, inner) = split_axis(&a.shape, ax);
                let v = a.values();
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] = out[o * inner + i] + v[(o * len + l) * inner + i];
                        }
                    }
                }
                self.record(Op::Sum(axis), &[a], reduced_shape(&a.shape, ax), out)
            }
        }
    }

    pub fn mean(&self, a: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>, AutodiffError> {
        let count = match axis {
            None => a.numel(),
            Some(ax) => {
                Self::check_axis("mean", a, ax)?;
                a.shape[ax]
            }
        };
        if count == 0 {
            return Err(AutodiffError::Domain {
                op: "mean",
                detail: "empty reduction".into(),
            });
        }
        let summed = self.sum(&a.detach(), axis)?;
        let c = T::from_usize_lossy(count);
        let values = summed.values().iter().map(|&x| x / c).collect();
        self.record(Op::Mean(axis), &[a], summed.shape, values)
    }

    /// Maximum over an axis; ties resolve to the first index.
    pub fn max(&self, a: &Tensor<T>, axis: Option<usize>) -> Result<Tensor<T>, AutodiffError> {
        if a.numel() == 0 {
            return Err(AutodiffError::Domain {
                op: "max",
                detail: "empty reduction".into(),
            });
        }
        let v = a.values();
        let (shape, outer, len, inner) = match axis {
            None => (Vec::new(), 1, v.len(), 1),
            Some(ax) => {
                Self::check_axis("max", a, ax)?;
                let (o, l, i) = split_axis(&a.shape, ax);
                (reduced_shape(&a.shape, ax), o, l, i)
            }
        };
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let k = (o * len + l) * inner + i;
                    if v[k] > v[best] {
                        best = k;
                    }
                }
                out.push(v[best]);
                argmax.push(best);
            }
        }
        self.record(Op::Max { argmax }, &[a], shape, out)
    }

    fn softmax_values(a: &Tensor<T>, axis: usize, log: bool) -> Vec<T> {
        let (outer, len, inner) = split_axis(&a.shape, axis);
        let v = a.values();
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| v[idx(l)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..len).map(|l| (v[idx(l)] - m).exp()).sum();
                if log {
                    let lz = z.ln();
                    for l in 0..len {
                        out[idx(l)] = v[idx(l)] - m - lz;
                    }
                } else {
                    for l in 0..len {
                        out[idx(l)] = (v[idx(l)] - m).exp() / z;
                    }
                }
            }
        }
        out
    }

    pub fn softmax(&self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>, AutodiffError> {
        Self::check_axis("softmax", a, axis)?;
        let values = Self::softmax_values(a, axis, false);
        self.record(Op::Softmax(axis), &[a], a.shape.clone(), values)
    }

    pub fn log_softmax(&self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>, AutodiffError> {
        Self::check_axis("log_softmax", a, axis)?;
        let values = Self::softmax_values(a, axis, true);
        self.record(Op::LogSoftmax(axis), &[a], a.shape.clone(), values)
    }

    /// Joins tensors whose shapes agree everywhere except along `axis`.
    pub fn concat(&self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Domain {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        Self::check_axis("concat", first, axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut values = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis];
                values.extend_from_slice(&p.values()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        self.record(Op::Concat { axis }, parts, shape, values)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(
        &self,
        a: &Tensor<T>,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Tensor<T>, AutodiffError> {
        Self::check_axis("slice", a, axis)?;
        if start > end || end > a.shape[axis] {
            return Err(AutodiffError::Domain {
                op: "slice",
                detail: format!("range {start}..{end} out of bounds for shape {:?}", a.shape),
            });
        }
        let (outer, len, inner) = split_axis(&a.shape, axis);
        let width = end - start;
        let mut values = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            values.extend_from_slice(
                &a.values()[(o * len + start) * inner..(o * len + end) * inner],
            );
        }
        let mut shape = a.shape.clone();
        shape[axis] = width;
        self.record(Op::Slice { axis, start }, &[a], shape, values)
    }

    /// Rows of a rank-2 tensor, in the given order (repeats allowed).
    pub fn gather_rows(&self, a: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>, AutodiffError> {
        if a.rank() != 2 {
            return Err(AutodiffError::InvalidAxis {
                op: "gather_rows",
                axis: 0,
                shape: a.shape.clone(),
            });
        }
        let (r, c) = (a.shape[0], a.shape[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::Domain {
                op: "gather_rows",
                detail: format!("row {bad} out of bounds for {r} rows"),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            values.extend_from_slice(&a.values()[i * c..(i + 1) * c]);
        }
        self.record(Op::GatherRows(rows.to_vec()), &[a], vec![rows.len(), c], values)
    }

    /// Reverse pass from a tracked one-element root.
    pub fn backward(&self, root: &Tensor<T>) -> Result<Gradients<T>, AutodiffError> {
        if root.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(root.shape.clone()));
        }
        let node = root.node.ok_or(AutodiffError::UntrackedRoot)?;
        if node.tape != self.id {
            return Err(AutodiffError::ForeignTensor { op: "backward" });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[node.id.0] = Some(vec![T::one()]);
        for idx in (0..=node.id.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let n = &nodes[idx];
            let contributions = backward_rule(n, &g);
            grads[idx] = Some(g);
            for (input, contrib) in n.inputs.iter().zip(contributions) {
                let (Some(r), Some(c)) = (input.node, contrib) else { continue };
                match &mut grads[r.id.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: nodes.iter().map(|n| n.out.shape.clone()).collect(),
        })
    }
}

fn zip_map<T: Scalar>(g: &[T], other: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().enumerate().map(|(k, &gk)| f(gk, bget(other, k))).collect()
}

/// Vector-Jacobian products of one node, `None` for untracked inputs.
fn backward_rule<T: Scalar>(node: &Node<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    let ins = &node.inputs;
    let out = node.out.values();
    let want = |k: usize| ins[k].node.is_some();
    let one = |k: usize, f: &dyn Fn() -> Vec<T>| if want(k) { Some(f()) } else { None };
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            one(0, &|| unbroadcast(g.to_vec(), &ins[0])),
            one(1, &|| unbroadcast(g.to_vec(), &ins[1])),
        ],
        Op::Sub => vec![
            one(0, &|| unbroadcast(g.to_vec(), &ins[0])),
            one(1, &|| unbroadcast(g.iter().map(|&x| -x).collect(), &ins[1])),
        ],
        Op::Mul => vec![
            one(0, &|| unbroadcast(zip_map(g, ins[1].values(), |gk, b| gk * b), &ins[0])),
            one(1, &|| unbroadcast(zip_map(g, ins[0].values(), |gk, a| gk * a), &ins[1])),
        ],
        Op::Div => {
            let (av, bv) = (ins[0].values(), ins[1].values());
            vec![
                one(0, &|| unbroadcast(zip_map(g, bv, |gk, b| gk / b), &ins[0])),
                one(1, &|| {
                    let v = (0..g.len())
                        .map(|k| {
                            let b = bget(bv, k);
                            -g[k] * bget(av, k) / (b * b)
                        })
                        .collect();
                    unbroadcast(v, &ins[1])
                }),
            ]
        }
        Op::Neg => vec![one(0, &|| g.iter().map(|&x| -x).collect())],
        Op::Scale(c) => vec![one(0, &|| g.iter().map(|&x| x * *c).collect())],
        Op::Power(p) => vec![one(0, &|| {
            zip_map(g, ins[0].values(), |gk, a| gk * *p * a.powf(*p - T::one()))
        })],
        Op::Exp => vec![one(0, &|| zip_map(g, out, |gk, y| gk * y))],
        Op::Log => vec![one(0, &|| zip_map(g, ins[0].values(), |gk, a| gk / a))],
        Op::Softplus => vec![one(0, &|| {
            zip_map(g, ins[0].values(), |gk, a| gk * scalar::sigmoid(a))
        })],
        Op::Sigmoid => vec![one(0, &|| zip_map(g, out, |gk, y| gk * y * (T::one() - y)))],
        Op::Tanh => vec![one(0, &|| zip_map(g, out, |gk, y| gk * (T::one() - y * y)))],
        Op::Relu => vec![one(0, &|| {
            zip_map(g, ins[0].values(), |gk, a| if a > T::zero() { gk } else { T::zero() })
        })],
        Op::Abs => vec![one(0, &|| {
            zip_map(g, ins[0].values(), |gk, a| {
                if a > T::zero() {
                    gk
                } else if a < T::zero() {
                    -gk
                } else {
                    T::zero()
                }
            })
        })],
        Op::Sin => vec![one(0, &|| zip_map(g, ins[0].values(), |gk, a| gk * a.cos()))],
        Op::Cos => vec![one(0, &|| zip_map(g, ins[0].values(), |gk, a| -gk * a.sin()))],
        Op::MatMul => {
            let (a, b) = (&ins[0], &ins[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            vec![
                one(0, &|| matmul_raw(g, &transpose_raw(b.values(), k, n), m, n, k)),
                one(1, &|| matmul_raw(&transpose_raw(a.values(), m, k), g, k, m, n)),
            ]
        }
        Op::Transpose => {
            let (r, c) = (ins[0].shape[0], ins[0].shape[1]);
            vec![one(0, &|| transpose_raw(g, c, r))]
        }
        Op::Reshape => vec![one(0, &|| g.to_vec())],
        Op::Sum(axis) | Op::Mean(axis) => {
            let a = &ins[0];
            let scale = match (&node.op, axis) {
                (Op::Mean(_), None) => T::one() / T::from_usize_lossy(a.numel()),
                (Op::Mean(_), Some(ax)) => T::one() / T::from_usize_lossy(a.shape[*ax]),
                _ => T::one(),
            };
            vec![one(0, &|| match axis {
                None => vec![g[0] * scale; a.numel()],
                Some(ax) => {
                    let (outer, len, inner) = split_axis(&a.shape, *ax);
                    let mut v = vec![T::zero(); a.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                v[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    v
                }
            })]
        }
        Op::Max { argmax, .. } => vec![one(0, &|| {
            let mut v = vec![T::zero(); ins[0].numel()];
            for (gk, &k) in g.iter().zip(argmax) {
                v[k] = v[k] + *gk;
            }
            v
        })],
        Op::Softmax(axis) | Op::LogSoftmax(axis) => {
            let is_log = matches!(node.op, Op::LogSoftmax(_));
            vec![one(0, &|| {
                let (outer, len, inner) = split_axis(&ins[0].shape, *axis);
                let mut v = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        if is_log {
                            let gs: T = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                v[idx(l)] = g[idx(l)] - out[idx(l)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..len).map(|l| g[idx(l)] * out[idx(l)]).sum();
                            for l in 0..len {
                                v[idx(l)] = out[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
                v
            })]
        }
        Op::Concat { axis } => {
            let (outer, _, inner) = split_axis(&node.out.shape, *axis);
            let total = node.out.shape[*axis];
            let mut offset = 0;
            ins.iter()
                .map(|p| {
                    let len = p.shape[*axis];
                    let start = offset;
                    offset += len;
                    p.node.map(|_| {
                        let mut v = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            v.extend_from_slice(&g[base..base + len * inner]);
                        }
                        v
                    })
                })
                .collect()
        }
        Op::Slice { axis, start } => vec![one(0, &|| {
            let a = &ins[0];
            let (outer, len, inner) = split_axis(&a.shape, *axis);
            let width = node.out.shape[*axis];
            let mut v = vec![T::zero(); a.numel()];
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                let src = o * width * inner;
                v[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
            }
            v
        })],
        Op::GatherRows(rows) => vec![one(0, &|| {
            let c = ins[0].shape[1];
            let mut v = vec![T::zero(); ins[0].numel()];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..c {
                    v[r * c + j] = v[r * c + j] + g[k * c + j];
                }
            }
            v
        })],
    }
}
