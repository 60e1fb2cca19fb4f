//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Design notes:
//!
//! - Data is row-major. Reductions and matrix products accumulate strictly
//!   left-to-right in ascending index order, so every forward op is bitwise
//!   deterministic given identical inputs.
//! - The computation graph *is* the tape: every op output holds `Rc` handles
//!   to its inputs plus the op kind. [`Tensor::backward`] walks reachable
//!   nodes in reverse creation order (creation ids are a topological order)
//!   and accumulates gradients. Calling backward twice without zeroing
//!   accumulates twice.
//! - Every forward op validates that its output is finite; NaN/Inf is
//!   reported as an error instead of propagating silently.
//! - `Tensor` is an `Rc` handle and deliberately not `Send`: a tape never
//!   crosses threads. Disjoint tensors on different threads are fine.

mod fdcheck;
mod kernels;
mod io;
mod ops;

pub use fdcheck::finite_diff_check;
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor};
pub(crate) use ops::Op;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Dense N-dimensional array of f64, optionally tracked on the autodiff tape.
///
/// Cloning is cheap (shared handle). Values are immutable after creation;
/// the exceptions are gradient accumulation and optimizer updates, which go
/// through interior mutability.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.node.shape, self.node.requires_grad
        )
    }
}

fn check_all_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Option<Op>,
    ) -> Tensor {
        let grad = if requires_grad && op.is_none() {
            Some(vec![0.0; data.len()])
        } else {
            None
        };
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(grad),
                op,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        check_all_finite("from_vec", &data)?;
        Ok(Tensor::new_node(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor on the tape (a trainable parameter or checked input).
    /// Its gradient buffer starts at zero.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "param",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        check_all_finite("param", &data)?;
        Ok(Tensor::new_node(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![0.0; numel], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![value; numel], false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_node(Vec::new(), vec![value], false, None)
    }

    /// Leaf filled with draws from U(lo, hi).
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::new_node(shape.to_vec(), data, false, None)
    }

    /// Parameter filled with draws from U(lo, hi).
    pub fn param_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::new_node(shape.to_vec(), data, true, None)
    }

    pub fn param_zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![0.0; numel], true, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Tensor> {
        check_all_finite(op.name(), &data)?;
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        if requires_grad {
            Ok(Tensor::new_node(shape, data, true, Some(op)))
        } else {
            Ok(Tensor::new_node(shape, data, false, None))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// True when this tensor is a leaf (no producing op).
    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.node.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// The single value of a scalar (or single-element) tensor.
    ///
    /// Panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.node.data.borrow()[0]
    }

    /// Mutable access to the raw values. Used by the optimizer and the
    /// finite-difference checker; forward results must not be mutated while
    /// a graph referencing them is still alive.
    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.node.data.borrow_mut()
    }

    /// Accumulated gradient, if backward has populated (or zero_grad
    /// initialized) it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Reset the gradient buffer to zeros.
    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = Some(vec![0.0; self.numel()]);
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar. Every tensor on the tape that is
    /// reachable from `self` gets its gradient accumulated; leaves keep
    /// their gradients across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.requires_grad {
            return Err(Error::Usage(
                "backward requires a tensor on the tape (nothing requires_grad)".into(),
            ));
        }

        // Reachable tape nodes in reverse creation order. Ids increase along
        // the forward pass, so descending id order is a valid reverse
        // topological order.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Tensor> = vec![self.clone()];
        let mut nodes: Vec<Tensor> = Vec::new();
        seen.insert(self.node.id);
        while let Some(t) = stack.pop() {
            if let Some(op) = &t.node.op {
                for input in op.inputs() {
                    if input.requires_grad() && seen.insert(input.node.id) {
                        stack.push(input.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));

        let mut pass: HashMap<u64, Vec<f64>> = HashMap::new();
        pass.insert(self.node.id, vec![1.0]);
        for t in &nodes {
            let Some(g) = pass.remove(&t.node.id) else {
                continue;
            };
            if let Some(op) = &t.node.op {
                op.backward(t, &g, &mut pass);
            }
            t.accumulate_grad(&g);
        }
        Ok(())
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }
}

/// Fetch (or create) the in-pass gradient buffer for `t`.
pub(crate) fn pass_slot<'a>(
    pass: &'a mut HashMap<u64, Vec<f64>>,
    t: &Tensor,
) -> &'a mut [f64] {
    pass.entry(t.id())
        .or_insert_with(|| vec![0.0; t.numel()])
        .as_mut_slice()
}

#[cfg(test)]
mod tests;
