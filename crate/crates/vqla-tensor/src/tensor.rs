//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! Every operation allocates a fresh output tensor holding its value and,
//! when gradients are enabled and at least one input requires them, a
//! backward closure plus strong references to its parents. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into every `requires_grad`
//! ancestor.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{contract_err, shape_err, Result, TensorError};
use crate::scalar::{Dtype, Scalar};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FINITE_CHECK: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

pub fn finite_check_enabled() -> bool {
    FINITE_CHECK.with(Cell::get)
}

/// Disables gradient recording on this thread until the guard is dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Enables the test-mode NaN/Inf scan after every op until dropped.
pub struct FiniteCheckGuard {
    prev: bool,
}

pub fn finite_checks() -> FiniteCheckGuard {
    let prev = FINITE_CHECK.with(|c| c.replace(true));
    FiniteCheckGuard { prev }
}

impl Drop for FiniteCheckGuard {
    fn drop(&mut self) {
        FINITE_CHECK.with(|c| c.set(self.prev));
    }
}

type BackwardFn<E> = Box<dyn Fn(&[E], &[Tensor<E>])>;

struct Node<E: Scalar> {
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Inner<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: Cell<bool>,
    node: Option<Node<E>>,
}

/// A dense n-dimensional array. Cloning is cheap (shared handle).
pub struct Tensor<E: Scalar> {
    inner: Rc<Inner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor<{}>(shape={:?}, requires_grad={})",
            E::DTYPE,
            self.inner.shape,
            self.requires_grad()
        )
    }
}

impl<E: Scalar> Tensor<E> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        node: Option<Node<E>>,
    ) -> Tensor<E> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                node,
            }),
        }
    }

    /// Leaf tensor from raw row-major values.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return shape_err("from_vec", "all dims must be >= 1");
        }
        if numel != data.len() {
            return shape_err(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            );
        }
        Ok(Self::new_inner(shape.to_vec(), data, false, None))
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Tensor<E>> {
        Self::from_vec(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Tensor<E> {
        let numel: usize = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![E::ZERO; numel], false, None)
    }

    pub fn full(shape: &[usize], value: E) -> Tensor<E> {
        let numel: usize = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![value; numel], false, None)
    }

    pub fn scalar(value: E) -> Tensor<E> {
        Self::new_inner(vec![1], vec![value], false, None)
    }

    /// Marks a leaf as trainable and returns it.
    pub fn with_grad(self) -> Tensor<E> {
        assert!(self.is_leaf(), "with_grad is only valid on leaf tensors");
        self.inner.requires_grad.set(true);
        self
    }

    /// Builds an op output. `backward` receives the output gradient and the
    /// parents and must call [`Tensor::accumulate_grad`] on each parent that
    /// requires one. This is the extension point custom ops hook into.
    pub fn from_custom_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
        parents: &[&Tensor<E>],
        backward: impl Fn(&[E], &[Tensor<E>]) + 'static,
    ) -> Result<Tensor<E>> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "op {op}");
        if finite_check_enabled() && data.iter().any(|v| !v.is_finite_val()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = if requires {
            Some(Node {
                parents: parents.iter().map(|p| (*p).clone()).collect(),
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Ok(Self::new_inner(shape, data, requires, node))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn dtype(&self) -> Dtype {
        E::DTYPE
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn data_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() requires a single-element tensor");
        d[0]
    }

    pub fn item_f64(&self) -> f64 {
        self.item().to_f64()
    }

    /// Overwrites the values of a leaf in place (optimizer updates,
    /// finite-difference probes). Length must match.
    pub fn set_data(&self, values: &[E]) {
        assert!(self.is_leaf(), "set_data is only valid on leaf tensors");
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len());
        d.copy_from_slice(values);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggles trainability of a leaf (used by freeze contracts).
    pub fn set_requires_grad(&self, on: bool) {
        assert!(self.is_leaf(), "set_requires_grad is only valid on leaves");
        self.inner.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `contrib` into this tensor's gradient buffer. No-op unless the
    /// tensor requires grad.
    pub fn accumulate_grad(&self, contrib: &[E]) {
        if !self.requires_grad() {
            return;
        }
        assert_eq!(
            contrib.len(),
            self.numel(),
            "gradient length must match tensor"
        );
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += *c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// New leaf holding a copy of this tensor's values, detached from the graph.
    pub fn detach(&self) -> Tensor<E> {
        Self::new_inner(self.inner.shape.clone(), self.data_vec(), false, None)
    }

    /// Reverse-mode sweep from a scalar root. Populates `grad` for every
    /// `requires_grad` ancestor with the exact reverse derivative.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return contract_err(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.shape()),
            );
        }
        if !self.requires_grad() {
            return contract_err("backward", "root does not require grad");
        }
        // Iterative DFS postorder; reversed postorder = consumers before producers.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, idx)) = stack.pop() {
            let parents = t.inner.node.as_ref().map(|n| &n.parents);
            let n_parents = parents.map_or(0, |p| p.len());
            if idx < n_parents {
                let parent = parents.unwrap()[idx].clone();
                stack.push((t, idx + 1));
                if parent.requires_grad() && !visited.contains(&parent.id()) {
                    visited.insert(parent.id());
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        self.accumulate_grad(&[E::ONE]);
        for t in order.iter().rev() {
            if let Some(node) = t.inner.node.as_ref() {
                let g = t.inner.grad.borrow();
                let g = g
                    .as_ref()
                    .expect("node reached in backward order must carry a gradient");
                (node.backward)(g, &node.parents);
            }
        }
        Ok(())
    }
}
