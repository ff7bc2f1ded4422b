//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted graph node. Nodes that do not depend on any
//! gradient-requiring leaf drop their parents immediately, so inference runs in
//! bounded memory without a separate no-grad mode.

mod conv;
mod ops;
mod spectral;

use std::collections::{BinaryHeap, HashMap};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;

pub use conv::conv_output_len;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct GradFn {
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Inputs handed to an op's backward closure.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub value: &'a Tensor,
    pub parents: &'a [Var],
    pub needs: &'a [bool],
}

impl BackwardCtx<'_> {
    pub fn input(&self, i: usize) -> &Tensor {
        self.parents[i].value()
    }
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Var#{}({:?}, grad={})",
            self.0.id, self.0.value, self.0.requires_grad
        )
    }
}

impl Var {
    fn from_node(value: Tensor, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Self::from_node(value, false, None)
    }

    /// A leaf whose gradient is reported by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Self {
        Self::from_node(value, true, None)
    }

    pub(crate) fn from_op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self::from_node(
                value,
                true,
                Some(GradFn {
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self) -> Gradients {
        assert_eq!(
            self.value().numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            self.shape()
        );
        self.backward_with(Tensor::full(self.shape().to_vec(), 1.0))
    }

    /// Back-propagates an explicit output cotangent.
    pub fn backward_with(&self, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape());
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads: leaves };
        }
        let mut pending: HashMap<u64, (Var, Tensor)> = HashMap::new();
        let mut heap = BinaryHeap::new();
        pending.insert(self.id(), (self.clone(), seed));
        heap.push(self.id());

        while let Some(id) = heap.pop() {
            let (var, grad) = pending.remove(&id).expect("queued node has a gradient");
            let Some(grad_fn) = &var.0.grad_fn else {
                leaves.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = grad_fn.parents.iter().map(Var::requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                value: var.value(),
                parents: &grad_fn.parents,
                needs: &needs,
            };
            let parent_grads = (grad_fn.backward)(&ctx);
            debug_assert_eq!(parent_grads.len(), grad_fn.parents.len());
            for ((parent, g), need) in grad_fn.parents.iter().zip(parent_grads).zip(&needs) {
                let (true, Some(g)) = (*need, g) else { continue };
                debug_assert_eq!(g.shape(), parent.shape(), "gradient shape mismatch");
                match pending.get_mut(&parent.id()) {
                    Some((_, acc)) => acc.add_assign(&g),
                    None => {
                        pending.insert(parent.id(), (parent.clone(), g));
                        heap.push(parent.id());
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Gradients of a scalar with respect to every reachable leaf.
pub struct Gradients {
    grads: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(&var.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
