//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after construction except for gradient accumulation
//! and in-place parameter updates between steps. A computation graph is owned
//! by a single trainer or generation session and is rebuilt every step.

mod ops;
mod optim;
mod scalar;

pub use ops::{concat_cols, concat_rows, embed, rope, weighted_embed};
pub use optim::{AdamW, LrSchedule, OptimizerHyper, OptimizerState};
pub use scalar::{Dtype, Scalar};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{bail_contract, bail_dim, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with graph recording disabled; ops built inside produce
/// detached tensors regardless of input `requires_grad`.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Shared handle to a node of the computation graph.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Tensor::new(shape, data, false);
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
            }),
        }
    }

    /// Leaf tensor holding data; `requires_grad` marks it trainable.
    pub fn from_vec(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            bail_dim!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            );
        }
        Ok(Tensor::new(shape.to_vec(), data, requires_grad))
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![T::zero(); n], requires_grad)
    }

    pub fn scalar(x: T) -> Self {
        Tensor::new(vec![1], vec![x], false)
    }

    pub fn full(shape: &[usize], x: T) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![x; n], false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer, for optimizer updates between steps.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += *d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Detached copy sharing no graph history.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// Rows and cols of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => bail_dim!("expected 2-D tensor, got shape {:?}", s),
        }
    }

    /// Populates gradients for every grad-tracked tensor reachable from this
    /// scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            bail_contract!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            );
        }
        if !self.requires_grad() {
            bail_contract!("backward requires a grad-tracked loss");
        }
        let order = topo_order(self);
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            if let Some(bw) = &node.inner.backward {
                let grad = node.inner.grad.borrow();
                if let Some(g) = grad.as_ref() {
                    bw(g);
                }
            }
        }
        Ok(())
    }
}

/// Post-order over the grad-tracked ancestry; reversed it yields a valid
/// backward schedule (every consumer before its producer).
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, idx)) = stack.pop() {
        if idx < node.inner.parents.len() {
            stack.push((node.clone(), idx + 1));
            let parent = node.inner.parents[idx].clone();
            if parent.requires_grad() && visited.insert(parent.id()) {
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
