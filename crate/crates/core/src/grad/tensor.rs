use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};
use crate::scalar::Real;

/// Creation counter; ids are unique process-wide and strictly increasing
/// within a thread, so sorting by id descending replays the tape in exact
/// reverse execution order.
static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(super) type BackwardFn<T> = Box<dyn Fn(&[T])>;

pub(super) struct Node<T: Real> {
    pub(super) id: u64,
    pub(super) shape: Vec<usize>,
    pub(super) data: Vec<T>,
    pub(super) grad: Option<Vec<T>>,
    pub(super) requires_grad: bool,
    pub(super) parents: Vec<Tensor<T>>,
    pub(super) backward: Option<BackwardFn<T>>,
}

/// Dense row-major tensor with optional gradient accumulation.
pub struct Tensor<T: Real> {
    pub(super) inner: Rc<RefCell<Node<T>>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.inner.borrow();
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            n.id, n.shape, n.requires_grad
        )
    }
}

impl<T: Real> Tensor<T> {
    fn fresh(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    /// Build a tensor from a shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::invalid(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self::fresh(shape.to_vec(), data, requires_grad))
    }

    /// Trainable parameter tensor.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::from_vec(shape, data, true)
    }

    /// Constant tensor (never accumulates gradient).
    pub fn constant(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::from_vec(shape, data, false)
    }

    /// Scalar constant, shape `[1]`.
    pub fn scalar(v: T) -> Self {
        Self::fresh(vec![1], vec![v], false)
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Self::fresh(shape.to_vec(), vec![T::zero(); numel], requires_grad)
    }

    /// Output node of an op. Records parents and the backward closure only
    /// when some input requires gradient.
    pub(super) fn op_output(
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T]) + 'static,
    ) -> Self {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let out = Self::fresh(shape, data, requires_grad);
        if requires_grad {
            let mut n = out.inner.borrow_mut();
            n.parents = inputs.iter().map(|t| (*t).clone()).collect();
            n.backward = Some(Box::new(backward));
        }
        out
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    /// Copy of the tensor data.
    pub fn data_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Copy of the accumulated gradient, if populated.
    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let n = self.inner.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
        n.data[0]
    }

    /// Replace the data in place (shape must match). Used by optimizers and
    /// checkpoint loading.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let mut n = self.inner.borrow_mut();
        if data.len() != n.data.len() {
            return Err(CoreError::invalid(
                "set_data",
                format!("expected {} elements, got {}", n.data.len(), data.len()),
            ));
        }
        n.data = data;
        Ok(())
    }

    /// Drop any accumulated gradient.
    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Accumulate `delta` into the gradient buffer. No-op for tensors that
    /// do not require gradient.
    pub(super) fn accumulate_grad(&self, delta: &[T]) {
        let mut n = self.inner.borrow_mut();
        if !n.requires_grad {
            return;
        }
        debug_assert_eq!(n.data.len(), delta.len());
        match &mut n.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => n.grad = Some(delta.to_vec()),
        }
    }

    /// Reverse pass: populate `grad` on every requires-grad tensor
    /// reachable from this scalar loss. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(CoreError::NonScalarLoss { shape: self.shape() });
        }
        if !self.requires_grad() {
            // Loss disconnected from any trainable input: nothing to do.
            return Ok(());
        }
        // Collect every ancestor of the loss.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        while let Some(t) = stack.pop() {
            let id = t.id();
            if !seen.insert(id) {
                continue;
            }
            for p in &t.inner.borrow().parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        // Exact reverse execution order.
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        // Adjoints of op outputs are per-pass scratch; only leaves keep
        // accumulating across calls.
        for t in &nodes {
            let mut n = t.inner.borrow_mut();
            if n.backward.is_some() {
                n.grad = None;
            }
        }

        self.accumulate_grad(&[T::one()]);
        for t in &nodes {
            let n = t.inner.borrow();
            if let (Some(grad), Some(back)) = (&n.grad, &n.backward) {
                back(grad);
            }
        }
        Ok(())
    }
}
