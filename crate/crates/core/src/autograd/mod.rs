//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every differentiable operation executed through a
//! [`Var`]. Each node stores its forward value and a one-shot adjoint closure;
//! [`Tape::backward`] replays those closures in reverse insertion order, which
//! is a valid topological order because nodes only reference earlier nodes.

mod ops;

pub use ops::{BinaryKind, ReduceKind, UnaryKind};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use crate::error::{PifError, Result};
use crate::params::ParamId;
use crate::tensor::{Float, Tensor};

type Adjoint<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    adjoint: Option<Adjoint<T>>,
    param: Option<ParamId>,
}

pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradient accumulator handed to adjoint closures.
pub struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
    needs: Vec<bool>,
}

impl<T: Float> GradSink<T> {
    pub fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    /// Run `f` on node `id`'s gradient buffer, allocating zeros on first use.
    /// Skipped entirely for nodes that do not require a gradient.
    pub fn accumulate(&mut self, id: usize, f: impl FnOnce(&mut [T])) {
        if !self.needs[id] {
            return;
        }
        let n = self.sizes[id];
        let buf = self.grads[id].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }

    pub fn add(&mut self, id: usize, g: &[T]) {
        self.accumulate(id, |buf| {
            for (b, &v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        });
    }
}

/// Result of a backward pass: gradients of every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Float> {
    by_node: HashMap<usize, Tensor<T>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Tape::leaf`].
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            grad_enabled: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that records values only; used for inference and finite differences.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
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

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value,
            requires_grad: self.grad_enabled,
            adjoint: None,
            param: None,
        })
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value,
            requires_grad: false,
            adjoint: None,
            param: None,
        })
    }

    /// Leaf bound to a parameter; repeated requests return the same node so
    /// that shared weights accumulate into one gradient.
    pub(crate) fn param_leaf(&self, id: ParamId, value: &Tensor<T>, trainable: bool) -> Var<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push(Node {
            value: value.clone(),
            requires_grad: self.grad_enabled && trainable,
            adjoint: None,
            param: Some(id),
        });
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    /// Record the result of a custom operation. `adjoint` receives the
    /// output gradient and must push contributions to the parents through
    /// the [`GradSink`]; it is dropped unused if no parent needs a gradient.
    pub fn record<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], adjoint: F) -> Var<'_, T>
    where
        F: FnOnce(&Tensor<T>, &mut GradSink<T>) + 'static,
    {
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value,
            requires_grad,
            adjoint: if requires_grad {
                Some(Box::new(adjoint))
            } else {
                None
            },
            param: None,
        })
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(PifError::Tape("backward on a no-grad tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(PifError::Tape("tape already consumed by a previous backward".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let n_loss = nodes[loss.id].value.len();
        if n_loss != 1 {
            return Err(PifError::Tape(format!(
                "loss must have exactly one element, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let count = loss.id + 1;
        let mut sink = GradSink {
            grads: (0..count).map(|_| None).collect(),
            sizes: nodes[..count].iter().map(|n| n.value.len()).collect(),
            needs: nodes[..count].iter().map(|n| n.requires_grad).collect(),
        };
        let mut out = Gradients {
            by_node: HashMap::new(),
            by_param: HashMap::new(),
        };
        if !sink.needs[loss.id] {
            return Ok(out);
        }
        sink.grads[loss.id] = Some(vec![T::one()]);
        for i in (0..count).rev() {
            let Some(g) = sink.grads[i].take() else {
                continue;
            };
            let node = &mut nodes[i];
            let g = Tensor::new_unchecked(node.value.shape().to_vec(), g);
            match node.adjoint.take() {
                Some(adj) => adj(&g, &mut sink),
                None => {
                    if let Some(pid) = node.param {
                        out.by_param.insert(pid, g);
                    } else {
                        out.by_node.insert(i, g);
                    }
                }
            }
        }
        for node in nodes.iter_mut() {
            node.adjoint = None;
        }
        Ok(out)
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }
}
