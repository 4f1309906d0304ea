//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to a node in a dynamically built
//! computation graph. Operations on tensors record backward closures; calling
//! [`Tensor::backward`] on a scalar loss propagates gradients to every
//! reachable parameter. Training code runs in `f32`; the same ops instantiate
//! at `f64` so gradient checks can run in double precision.

mod adam;
mod init;
mod kernels;
mod ops;

pub use adam::{clip_grad_norm, Adam, AdamParams, AdamState};
pub use init::{xavier_bound, xavier_init, xavier_init_seeded};
pub use kernels::{kernel_threads, matmul_nn, matmul_nt, matmul_tn};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use num_traits::Float;
use thiserror::Error;

/// Element types the tensor core supports: `f32` for model storage and
/// training, `f64` for the finite-difference gradient harness.
pub trait Scalar: Float + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Errors surfaced by tensor construction, ops and the optimizer.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} requires rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("attention mask leaves query row {row} with no allowed position")]
    DegenerateMask { row: usize },
    #[error("optimizer step: parameter \"{0}\" has no gradient")]
    MissingGradient(String),
}

thread_local! {
    static GRAD_DISABLED: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with gradient recording disabled (inference mode). Nesting is
/// safe; the previous state is restored on exit.
pub fn with_no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_DISABLED.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

fn grad_enabled() -> bool {
    GRAD_DISABLED.with(|flag| !flag.get())
}

/// One recorded operation: the parents it consumed and a closure that maps
/// the output gradient to gradient contributions on those parents.
type GradFn<T> = Box<dyn Fn(&[T])>;

struct BackwardStep<T: Scalar> {
    parents: Vec<Tensor<T>>,
    apply: GradFn<T>,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    step: Option<BackwardStep<T>>,
}

impl<T: Scalar> Drop for Node<T> {
    fn drop(&mut self) {
        // Long op chains would otherwise tear down recursively (each node's
        // drop dropping its parents) and overflow the stack. Dismantle the
        // chain iteratively instead: keep parents alive on an explicit stack,
        // detach their steps, and let the now-leafless nodes drop flat.
        let mut stack: Vec<Tensor<T>> = Vec::new();
        if let Some(step) = self.step.take() {
            stack.extend(step.parents);
        }
        while let Some(tensor) = stack.pop() {
            if let Some(mut node) = Rc::into_inner(tensor.0) {
                if let Some(step) = node.step.take() {
                    stack.extend(step.parents);
                }
            }
        }
    }
}

/// Handle to a node in the autodiff graph. Cloning is cheap and shares
/// storage.
#[derive(Clone)]
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_node(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        step: Option<BackwardStep<T>>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            step,
        }))
    }

    /// A constant leaf: participates in forward math, receives no gradient.
    pub fn constant(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        Self::check_numel(&data, shape)?;
        Ok(Self::new_node(data, shape.to_vec(), false, None))
    }

    /// A trainable leaf: `backward` accumulates a gradient here.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        Self::check_numel(&data, shape)?;
        Ok(Self::new_node(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_node(vec![T::zero(); n], shape.to_vec(), false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::new_node(vec![v], vec![1], false, None)
    }

    fn check_numel(data: &[T], shape: &[usize]) -> Result<(), TensorError> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(TensorError::InvalidParameter(format!(
                "data of length {} cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(())
    }

    /// Builds an op output. Gradient recording is skipped when disabled or
    /// when no parent requires a gradient.
    ///
    /// Invariant: any tensor the `apply` closure captures must also appear in
    /// `parents`, otherwise the iterative teardown in `Node::drop` cannot see
    /// it and deep chains through that edge could recurse on drop.
    fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        apply: impl Fn(&[T]) + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Self::new_node(
                data,
                shape,
                true,
                Some(BackwardStep {
                    parents,
                    apply: Box::new(apply),
                }),
            )
        } else {
            Self::new_node(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copies the element values out.
    pub fn values(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Extracts the single element of a scalar tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::ContractViolation(format!(
                "item() on non-scalar shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data.borrow()[0])
    }

    /// Copies the accumulated gradient out, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the stored values in place (used by the optimizer and by
    /// checkpoint loading). The length must match the existing shape.
    pub fn set_values(&self, values: Vec<T>) -> Result<(), TensorError> {
        Self::check_numel(&values, &self.0.shape)?;
        *self.0.data.borrow_mut() = values;
        Ok(())
    }

    fn accumulate_grad(&self, contribution: &[T]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(contribution) {
                    *dst = *dst + *src;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode gradient propagation from a scalar loss.
    ///
    /// Contract: every trainable leaf reachable from the loss must have been
    /// cleared (`zero_grad`) since its last backward pass; stale gradients
    /// are reported as an error rather than silently accumulated.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::ContractViolation(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        let order = self.topo_order();

        for node in &order {
            if node.0.step.is_none() && node.0.requires_grad && node.0.grad.borrow().is_some() {
                return Err(TensorError::ContractViolation(
                    "backward() found a leaf with a stale gradient; call zero_grad first"
                        .to_string(),
                ));
            }
        }

        self.accumulate_grad(&[T::one()]);

        for node in order.iter().rev() {
            let Some(step) = node.0.step.as_ref() else {
                continue;
            };
            let grad_out = node.0.grad.borrow().clone();
            if let Some(g) = grad_out {
                (step.apply)(&g);
            }
            // Interior gradients are consumed immediately; free the buffer.
            *node.0.grad.borrow_mut() = None;
        }
        Ok(())
    }

    /// Iterative post-order over the graph (children after all parents,
    /// so the reverse is a valid propagation order).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        // (node, parents_expanded)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.0);
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(step) = node.0.step.as_ref() {
                for parent in &step.parents {
                    if !visited.contains(&Rc::as_ptr(&parent.0)) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_construction_checks_shape() {
        let err = Tensor::<f32>::parameter(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidParameter(_)));
        let t = Tensor::<f32>::parameter(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let t = Tensor::<f32>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let doubled = t.scale(2.0);
        assert!(matches!(
            doubled.backward(),
            Err(TensorError::ContractViolation(_))
        ));
    }

    #[test]
    fn backward_on_parameter_leaf_gives_unit_gradient() {
        let p = Tensor::<f64>::parameter(vec![3.5], &[1]).unwrap();
        p.backward().unwrap();
        assert_eq!(p.grad(), Some(vec![1.0]));
    }

    #[test]
    fn stale_gradient_is_rejected() {
        let p = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let loss = p.sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad(), Some(vec![1.0, 1.0]));

        // Second backward without clearing must fail loudly.
        let loss2 = p.sum_all();
        let err = loss2.backward().unwrap_err();
        assert!(matches!(err, TensorError::ContractViolation(_)));

        // After clearing it works again and the gradient is fresh, not doubled.
        p.zero_grad();
        let loss3 = p.sum_all();
        loss3.backward().unwrap();
        assert_eq!(p.grad(), Some(vec![1.0, 1.0]));
    }

    #[test]
    fn no_grad_suppresses_graph_building() {
        let p = Tensor::<f32>::parameter(vec![2.0], &[1]).unwrap();
        let out = with_no_grad(|| p.scale(3.0));
        assert!(!out.requires_grad());
        assert_eq!(out.values(), vec![6.0]);
        // Outside the scope recording resumes.
        let tracked = p.scale(3.0);
        assert!(tracked.requires_grad());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = (p + p) . sum => dloss/dp = 2 per element.
        let p = Tensor::<f64>::parameter(vec![1.0, -4.0], &[2]).unwrap();
        let s = p.add(&p).unwrap();
        let loss = s.sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad(), Some(vec![2.0, 2.0]));
    }

    #[test]
    fn shared_subexpression_used_twice() {
        // y = p * p ; loss = sum(y + y) => d/dp = 4p.
        let p = Tensor::<f64>::parameter(vec![3.0], &[1]).unwrap();
        let y = p.mul(&p).unwrap();
        let loss = y.add(&y).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad(), Some(vec![12.0]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let p = Tensor::<f64>::parameter(vec![2.0], &[1]).unwrap();
        let c = Tensor::<f64>::constant(vec![5.0], &[1]).unwrap();
        let loss = p.mul(&c).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad(), Some(vec![5.0]));
        assert_eq!(c.grad(), None);
    }

    #[test]
    fn deep_chain_does_not_overflow_stack() {
        // Iterative topological sort must handle graphs far deeper than any
        // recursion limit.
        let p = Tensor::<f32>::parameter(vec![1.0], &[1]).unwrap();
        let mut x = p.scale(1.0);
        for _ in 0..50_000 {
            x = x.scale(1.0);
        }
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad(), Some(vec![1.0]));
    }
}
