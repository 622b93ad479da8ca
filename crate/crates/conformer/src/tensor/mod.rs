//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values are immutable after creation (the buffer is behind an `Arc`), so
//! plain tensors can be shared freely. Gradient tracking happens through a
//! [`Tape`]: binding a tensor as a leaf ties it to the tape, and every
//! operation touching a bound tensor is recorded. The tape is `Rc`-backed and
//! deliberately not `Send`; one tape per training step, one thread per tape.
//!
//! Broadcasting is restricted to trailing-dimension expansion: the right-hand
//! operand must have the same shape, be a scalar, or be a suffix of the
//! left-hand shape. Debug builds trap on the first non-finite value an op
//! produces; release builds propagate.

mod compute;
mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::OP_NAMES;

use std::cell::RefCell;
use std::rc::{Rc, Weak};
use std::sync::Arc;

use tape::{NodeId, Op, TapeInner};

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

#[derive(Clone)]
struct NodeRef {
    tape: Weak<RefCell<TapeInner>>,
    id: NodeId,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("bound", &self.node.is_some())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match buffer length {}",
            data.len()
        );
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn from_arc(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar_tensor(value: f64) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn is_bound(&self) -> bool {
        self.node.is_some()
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "scalar() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Strip any tape binding, keeping the value.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    // ---- shape ops ----------------------------------------------------

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        record(&[self], Op::Reshape, shape, |ins| ins[0].to_vec())
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose2 needs rank 2, got {:?}", self.shape);
        let (r, c) = (self.shape[0], self.shape[1]);
        record(&[self], Op::Transpose2, vec![c, r], |ins| compute::transpose2(ins[0], r, c))
    }

    /// Rows [start, start+len) along the first axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        assert!(!self.shape.is_empty());
        let rows = self.shape[0];
        assert!(start + len <= rows, "slice {start}+{len} out of {rows} rows");
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        record(&[self], Op::SliceRows { start_elem: start * row }, shape, |ins| {
            ins[0][start * row..(start + len) * row].to_vec()
        })
    }

    /// Select rows by index along the first axis (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let rows = self.shape[0];
        let row: usize = self.shape[1..].iter().product();
        for &i in indices {
            assert!(i < rows, "gather index {i} out of {rows} rows");
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let idx = Arc::new(indices.to_vec());
        let idx2 = Arc::clone(&idx);
        record(&[self], Op::GatherRows { indices: idx, row }, shape, move |ins| {
            let mut out = Vec::with_capacity(idx2.len() * row);
            for &i in idx2.iter() {
                out.extend_from_slice(&ins[0][i * row..(i + 1) * row]);
            }
            out
        })
    }

    /// Concatenate along the first axis; trailing dimensions must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let trail = &parts[0].shape[1..];
        let mut rows = 0;
        let mut row_bytes = Vec::with_capacity(parts.len());
        for p in parts {
            assert_eq!(&p.shape[1..], trail, "concat_rows trailing dims differ");
            rows += p.shape[0];
            row_bytes.push(p.numel());
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = rows;
        record(parts, Op::ConcatRows { row_bytes }, shape, |ins| {
            let mut out = Vec::new();
            for part in ins {
                out.extend_from_slice(part);
            }
            out
        })
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2, "matmul lhs must be rank 2, got {:?}", self.shape);
        assert_eq!(rhs.shape.len(), 2, "matmul rhs must be rank 2, got {:?}", rhs.shape);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        assert_eq!(k, k2, "matmul inner dimensions disagree: {:?} vs {:?}", self.shape, rhs.shape);
        record(&[self, rhs], Op::Matmul, vec![m, n], move |ins| {
            compute::matmul(ins[0], ins[1], m, k, n)
        })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        #[cfg(debug_assertions)]
        for &v in rhs.data.iter() {
            assert!(v != 0.0, "division by zero");
        }
        self.binary(rhs, Op::Div, |a, b| a / b)
    }

    fn binary(&self, rhs: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let (la, lb) = (self.numel(), rhs.numel());
        let suffix_ok = lb == 1
            || la == lb
            || (la % lb == 0 && self.shape.ends_with(&rhs.shape));
        assert!(
            suffix_ok,
            "{} operands not broadcast-compatible: {:?} vs {:?} (rhs must match, be scalar, or be a trailing suffix)",
            op.name(),
            self.shape,
            rhs.shape
        );
        let shape = self.shape.clone();
        record(&[self, rhs], op, shape, move |ins| {
            let (a, b) = (ins[0], ins[1]);
            a.iter().enumerate().map(|(i, &av)| f(av, b[i % b.len()])).collect()
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        record(&[self], Op::Scale { factor }, self.shape.clone(), move |ins| {
            ins[0].iter().map(|v| v * factor).collect()
        })
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor {
        record(&[self], Op::AddScalar, self.shape.clone(), move |ins| {
            ins[0].iter().map(|v| v + offset).collect()
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        record(&[self], Op::Relu, self.shape.clone(), |ins| {
            ins[0].iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
        })
    }

    pub fn abs(&self) -> Tensor {
        record(&[self], Op::Abs, self.shape.clone(), |ins| {
            ins[0].iter().map(|v| v.abs()).collect()
        })
    }

    pub fn exp(&self) -> Tensor {
        record(&[self], Op::Exp, self.shape.clone(), |ins| {
            ins[0].iter().map(|v| v.exp()).collect()
        })
    }

    pub fn log(&self) -> Tensor {
        #[cfg(debug_assertions)]
        for &v in self.data.iter() {
            assert!(v > 0.0, "log of non-positive value {v}");
        }
        record(&[self], Op::Log, self.shape.clone(), |ins| {
            ins[0].iter().map(|v| v.ln()).collect()
        })
    }

    pub fn sqrt(&self) -> Tensor {
        record(&[self], Op::Sqrt, self.shape.clone(), |ins| {
            ins[0].iter().map(|v| v.sqrt()).collect()
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        record(&[self], Op::Sigmoid, self.shape.clone(), |ins| {
            ins[0].iter().map(|&v| compute::sigmoid(v)).collect()
        })
    }

    pub fn gelu(&self) -> Tensor {
        record(&[self], Op::Gelu, self.shape.clone(), |ins| {
            ins[0].iter().map(|&v| compute::gelu(v)).collect()
        })
    }

    // ---- reductions and normalizations -----------------------------------

    pub fn softmax(&self, axis: usize) -> Tensor {
        assert!(axis < self.shape.len(), "softmax axis {axis} out of rank {}", self.shape.len());
        let shape = self.shape.clone();
        let s2 = shape.clone();
        record(&[self], Op::Softmax { axis }, shape, move |ins| {
            compute::softmax(ins[0], &s2, axis)
        })
    }

    /// Layer norm over the last dimension; gamma/beta have that length.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        assert!(eps > 0.0, "layernorm eps must be positive");
        let c = *self.shape.last().expect("layernorm on rank-0 tensor");
        assert_eq!(gamma.numel(), c, "gamma length {} != {c}", gamma.numel());
        assert_eq!(beta.numel(), c, "beta length {} != {c}", beta.numel());
        record(&[self, gamma, beta], Op::LayerNorm { eps }, self.shape.clone(), move |ins| {
            compute::layernorm(ins[0], ins[1], ins[2], c, eps)
        })
    }

    pub fn sum_all(&self) -> Tensor {
        record(&[self], Op::SumAll, vec![1], |ins| vec![ins[0].iter().sum()])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Differentiable RoI align: `self` is a [hf, wf, c] feature grid, `b`
    /// a (cx, cy, w, h) box in normalized coordinates; output [bins, bins, c].
    pub fn roi_align(&self, b: &Tensor, bins: usize, min_size: f64) -> Tensor {
        assert!(bins > 0, "roi_align needs at least one bin per side");
        assert_eq!(self.shape.len(), 3, "roi_align grid must be [h, w, c], got {:?}", self.shape);
        assert_eq!(b.numel(), 4, "roi_align box must have 4 coordinates");
        let (hf, wf, c) = (self.shape[0], self.shape[1], self.shape[2]);
        record(
            &[self, b],
            Op::RoiAlign { hf, wf, channels: c, bins, min_size },
            vec![bins, bins, c],
            move |ins| compute::roi_align(ins[0], ins[1], hf, wf, c, bins, min_size),
        )
    }
}

impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        Tensor::add(self, rhs)
    }
}
impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        Tensor::sub(self, rhs)
    }
}
impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        Tensor::mul(self, rhs)
    }
}
impl std::ops::Div for &Tensor {
    type Output = Tensor;
    fn div(self, rhs: &Tensor) -> Tensor {
        Tensor::div(self, rhs)
    }
}

/// Records `op` on the tape shared by any bound input; unbound inputs are
/// interned as constants. When no input needs gradients the result stays
/// unbound and nothing is recorded.
fn record(
    inputs: &[&Tensor],
    op: Op,
    out_shape: Vec<usize>,
    forward: impl FnOnce(&[&[f64]]) -> Vec<f64>,
) -> Tensor {
    let raw: Vec<&[f64]> = inputs.iter().map(|t| t.data.as_slice()).collect();
    let out = forward(&raw);
    debug_assert!(
        out.iter().all(|v| v.is_finite()),
        "non-finite value produced by {}",
        op.name()
    );
    let out = Arc::new(out);

    let mut tape: Option<Rc<RefCell<TapeInner>>> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            if let Some(rc) = node.tape.upgrade() {
                match &tape {
                    Some(existing) => assert!(
                        Rc::ptr_eq(existing, &rc),
                        "operands belong to different tapes"
                    ),
                    None => tape = Some(rc),
                }
            }
        }
    }

    let Some(tape) = tape else {
        return Tensor { shape: out_shape, data: out, node: None };
    };

    let needs_grad = {
        let inner = tape.borrow();
        inputs.iter().any(|t| match &t.node {
            Some(n) => inner.nodes[n.id].needs_grad,
            None => false,
        })
    };
    if !needs_grad {
        return Tensor { shape: out_shape, data: out, node: None };
    }

    let mut inner = tape.borrow_mut();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| match &t.node {
            Some(n) if n.tape.upgrade().is_some() => n.id,
            _ => inner.push_node(Arc::clone(&t.data), t.shape.clone(), false, false),
        })
        .collect();
    let out_id = inner.push_node(Arc::clone(&out), out_shape.clone(), false, true);
    inner.steps.push(tape::Step { op, inputs: ids, output: out_id });
    drop(inner);

    Tensor {
        shape: out_shape,
        data: out,
        node: Some(NodeRef { tape: Rc::downgrade(&tape), id: out_id }),
    }
}

/// Recording tape for one reverse-mode pass. Not shareable across threads.
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner::default())) }
    }

    /// Register a leaf tensor. With `requires_grad`, gradients accumulate in
    /// its buffer across backward calls until `zero_grads`.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.push_node(
            Arc::clone(&t.data),
            t.shape.clone(),
            requires_grad,
            requires_grad,
        );
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(NodeRef { tape: Rc::downgrade(&self.inner), id }),
        }
    }

    /// Reverse sweep from a scalar loss; leaf gradients accumulate (+=).
    pub fn backward(&self, loss: &Tensor) {
        let node = loss.node.as_ref().expect("loss is not bound to a tape");
        let rc = node.tape.upgrade().expect("tape dropped before backward");
        assert!(Rc::ptr_eq(&rc, &self.inner), "loss belongs to a different tape");
        self.inner.borrow_mut().backward(node.id);
    }

    /// Accumulated gradient of a bound tensor, if any backward has run.
    pub fn grad(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node.as_ref()?;
        let inner = self.inner.borrow();
        let slot = &inner.nodes[node.id];
        slot.grad.as_ref().map(|g| Tensor::from_vec(slot.shape.clone(), g.clone()))
    }

    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    /// Corrupt the backward rule of the named op by a multiplicative factor.
    /// Used to demonstrate that the finite-difference harness catches a
    /// broken rule; see the gradcheck command.
    pub fn sabotage_backward(&self, op_name: &str, factor: f64) {
        assert!(
            OP_NAMES.contains(&op_name),
            "unknown op {op_name:?}; valid ops: {OP_NAMES:?}"
        );
        self.inner.borrow_mut().sabotage = Some((op_name.to_string(), factor));
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }
}

#[cfg(test)]
mod tests;
