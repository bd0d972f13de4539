use std::cell::{Cell, RefCell};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule: receives the upstream gradient of the node output and a
/// per-input "needs gradient" mask; returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    output: Tensor<T>,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

/// Ordered record of differentiable operations.
///
/// A tape lives for one forward/backward pass. [`Tape::backward`] replays the
/// nodes in reverse recording order and consumes them, which releases every
/// saved activation.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    enabled: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            enabled: Cell::new(true),
        }
    }

    /// A tape that never records; every result is an untracked constant.
    pub fn no_grad() -> Self {
        let tape = Self::new();
        tape.enabled.set(false);
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node without propagating gradients.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub(crate) fn record(
        &self,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: BackwardFn<T>,
    ) -> Tensor<T> {
        let tracked = self.enabled.get() && inputs.iter().any(|t| t.is_tracked());
        let output = Tensor::from_op(shape, data, tracked);
        if tracked {
            self.nodes.borrow_mut().push(Node {
                output: output.clone(),
                inputs: inputs.iter().map(|&t| t.clone()).collect(),
                backward,
            });
        }
        output
    }

    /// Propagates d(loss)/d(·) into every tracked tensor reachable from
    /// `loss`, accumulating onto any gradient already present.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if !loss.is_tracked() {
            return Err(Error::Usage(
                "backward() on a tensor that is not tracked by a tape".into(),
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.accumulate_grad(&[T::one()]);
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        for node in nodes.into_iter().rev() {
            let Node {
                output,
                inputs,
                backward,
            } = node;
            let needs: Vec<bool> = inputs.iter().map(Tensor::is_tracked).collect();
            let grads = {
                let upstream = output.grad_ref();
                let Some(g) = upstream.as_ref() else {
                    continue;
                };
                backward(g, &needs)
            };
            for (input, grad) in inputs.iter().zip(grads) {
                if let Some(grad) = grad {
                    input.accumulate_grad(&grad);
                }
            }
        }
        Ok(())
    }
}
