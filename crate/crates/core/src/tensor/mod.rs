//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after construction; only gradient buffers mutate,
//! and only during a (single-threaded) backward pass. Every op that can
//! influence a tracked leaf records its parents and a backward closure, so
//! calling [`Tensor::backward`] on a scalar populates the gradients of all
//! reachable leaves. Recording is skipped inside [`no_grad`], which is what
//! the decoding paths use.
//!
//! Storage is row-major `Vec<f64>` behind an `Rc`, so reshapes alias rather
//! than copy. Broadcasting aligns trailing dimensions.

mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, SbsgError};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// True when ops on this thread record the computation graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Backward closure: receives the node's output gradient, the node's output
/// data, and its parents, and accumulates into the parents' gradient buffers.
type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

struct Edge {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

pub(crate) struct TensorInner {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    edge: Option<Edge>,
}

/// A dense multi-dimensional array of f64 with optional gradient tracking.
///
/// Cloning is cheap (reference-counted handle to shared immutable storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor from row-major data. Errors if the element count does
    /// not match the shape product.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(SbsgError::Dimension(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), Rc::new(data), false, None))
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: f64) -> Tensor {
        Self::from_parts(vec![1], Rc::new(vec![v]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), Rc::new(vec![0.0; numel]), false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), Rc::new(vec![1.0; numel]), false, None)
    }

    /// Marks this tensor as a leaf whose gradient should be populated by
    /// backward passes. Returns a new handle to the same storage.
    pub fn with_grad(&self) -> Tensor {
        Self::from_parts(self.inner.shape.clone(), Rc::clone(&self.inner.data), true, None)
    }

    fn from_parts(
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        requires_grad: bool,
        edge: Option<Edge>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                edge,
            }),
        }
    }

    /// Creates an op result node. Records the edge only when grad mode is on
    /// and at least one parent is tracked.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let tracked = grad_enabled() && parents.iter().any(Tensor::tracked);
        let edge = if tracked { Some(Edge { parents, backward }) } else { None };
        Self::from_parts(shape, Rc::new(data), false, edge)
    }

    /// Like `from_op` but reusing existing storage (reshape-style views).
    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let tracked = grad_enabled() && parents.iter().any(Tensor::tracked);
        let edge = if tracked { Some(Edge { parents, backward }) } else { None };
        Self::from_parts(shape, data, false, edge)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.inner.data)
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when this node participates in gradient flow.
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.edge.is_some()
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Drops any accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// A handle to the same data with no graph history and no grad flag.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.inner.shape.clone(), Rc::clone(&self.inner.data), false, None)
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar. Populates `grad` on every tracked
    /// leaf reachable from `self`; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(SbsgError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(edge) = &node.inner.edge {
                let grad = {
                    let slot = node.inner.grad.borrow();
                    match slot.as_ref() {
                        Some(g) => g.clone(),
                        None => continue, // node did not contribute to the loss
                    }
                };
                (edge.backward)(&grad, &node.inner.data, &edge.parents);
                // Intermediate grads are no longer needed once distributed.
                if !node.inner.requires_grad {
                    *node.inner.grad.borrow_mut() = None;
                }
            }
        }
        Ok(())
    }
}

/// Post-order DFS over the recorded graph (parents precede children).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const TensorInner> = HashSet::new();
    // Iterative DFS; stack entries are (node, child_cursor).
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(Rc::as_ptr(&root.inner));
    while let Some((node, cursor)) = stack.pop() {
        let parents = node.inner.edge.as_ref().map(|e| &e.parents);
        let n_parents = parents.map_or(0, Vec::len);
        if cursor < n_parents {
            stack.push((node.clone(), cursor + 1));
            let parent = node.inner.edge.as_ref().unwrap().parents[cursor].clone();
            let key = Rc::as_ptr(&parent.inner);
            if parent.inner.edge.is_some() && !visited.contains(&key) {
                visited.insert(key);
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

#[cfg(test)]
mod tests;
