//! Wengert-list recording of primitive applications and the reverse sweep.
//!
//! Every primitive pushes one node holding its output value, its parent ids
//! and an adjoint rule. Node ids are assigned in creation order, so the list is
//! topologically sorted by construction and the reverse sweep is a single pass
//! from the loss id down to zero.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Adjoint rule of a recorded primitive.
pub trait Backward<T: Real> {
    /// Primitive name, used in gradient-check reports and fault injection.
    fn name(&self) -> &'static str;

    /// Returns one gradient per input. `needs[i]` is false for inputs that do
    /// not lead to any trainable leaf; rules may return `None` for those.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Perturbation applied to one primitive's adjoint, for negative-control runs
/// of the gradient checker.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointFault {
    pub primitive: String,
    pub scale: f64,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    fault: Option<AdjointFault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            fault: None,
        }
    }

    /// A tape whose adjoint for `fault.primitive` is deliberately wrong.
    pub fn with_fault(fault: AdjointFault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::new()
        }
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

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            op: None,
            requires_grad: true,
        })
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            op: None,
            requires_grad: false,
        })
    }

    /// Records the application of a primitive whose output is `value`.
    pub fn record<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        op: impl Backward<T> + 'static,
    ) -> Var<'t, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
            requires_grad,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let shape = loss.shape();
        if loss.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_with_seed(loss, Tensor::ones(&shape))
    }

    /// Reverse sweep seeded with an arbitrary cotangent of `root`'s shape
    /// (a vector-Jacobian product).
    pub fn backward_with_seed(&self, root: Var<'_, T>, seed: Tensor<T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(TensorError::ForeignVariable);
        }
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[root.id].value.shape() {
            return Err(TensorError::mismatch(
                "backward seed",
                seed.shape(),
                nodes[root.id].value.shape(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(seed);
        let mut leaves = HashMap::new();

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let Some(op) = node.op.as_ref() else {
                leaves.insert(id, grad);
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &*nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let mut in_grads = op.backward(&inputs, &node.value, &grad, &needs);
            if let Some(fault) = &self.fault {
                if fault.primitive == op.name() {
                    let s = T::lit(fault.scale);
                    for g in in_grads.iter_mut().flatten() {
                        g.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            for ((&p, g), need) in node.parents.iter().zip(in_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                if g.shape() != nodes[p].value.shape() {
                    return Err(TensorError::AdjointShape {
                        op: op.name(),
                        got: g.shape().to_vec(),
                        expected: nodes[p].value.shape().to_vec(),
                    });
                }
                match &mut grads[p] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of the swept root with respect to trainable leaves.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    /// Gradient for `var`, zero-filled when unreachable.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.leaves
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        self.leaves
            .remove(&var.id)
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVariable)
        }
    }
}
