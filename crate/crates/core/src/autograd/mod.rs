//! Tape-based reverse-mode automatic differentiation over [`Tensor`].
//!
//! Every differentiable operation pushes one node holding a backward
//! closure onto the [`Tape`]. Values live in the [`Var`] handles, so a tape
//! built with [`Tape::no_grad`] records nothing and intermediate tensors are
//! freed as soon as their handles drop.

mod nn_ops;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use nn_ops::ConvGeometry;
pub(crate) use nn_ops::compositing_weights;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records; every result is a constant.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tracked input whose gradient is retained by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = if self.grad_enabled {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    pub(crate) fn record<'t, F>(
        &'t self,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: F,
    ) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        let id = if self.grad_enabled && parents.iter().any(Option::is_some) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents,
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: &Var<'_, T>) -> Gradients<T> {
        self.backward_with(root, Tensor::ones(root.shape()))
    }

    pub fn backward_with(&self, root: &Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), root.shape(), "seed shape mismatch");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let Some(root_id) = root.id else {
            return Gradients { grads };
        };
        grads[root_id] = Some(seed);
        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of leaves after a backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        var.id.and_then(|id| self.grads.get_mut(id)).and_then(Option::take)
    }

    /// Gradient of `var`, or zeros when it did not influence the root.
    pub fn get_or_zeros(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// A value on a tape. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        Var {
            tape: self.tape,
            id: None,
            value: self.rc(),
        }
    }
}
