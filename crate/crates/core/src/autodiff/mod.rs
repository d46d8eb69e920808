//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order (an operation is appended after all of its inputs, so index order
//! is execution order). [`Tape::backward`] consumes the tape, walks the
//! records once in reverse, and returns the accumulated gradients of every
//! leaf that was registered with `requires_grad`.
//!
//! A tape is single-owner: concurrent forward passes each build their own
//! tape. Gradients for shared parameters are summed outside the tape by
//! the caller (see the trainer's accumulation window).

mod ops;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&[Tensor<T>], &Tensor<T>, &mut GradStore<T>)>;

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    steps: Vec<Option<BackFn<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), requires: Vec::new(), steps: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Record a value that does not take gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, None)
    }

    /// Record a differentiable leaf (a parameter lease).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    pub(crate) fn next_id(&self) -> usize {
        self.values.len()
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        requires: bool,
        step: Option<BackFn<T>>,
    ) -> NodeId {
        self.values.push(value);
        self.requires.push(requires);
        self.steps.push(step);
        NodeId(self.values.len() - 1)
    }

    /// Run the reverse pass from a scalar loss. Consumes the tape; every
    /// node is visited at most once, in reverse recording order. Gradients
    /// of interior nodes are dropped as soon as they have been propagated;
    /// leaf gradients are returned.
    pub fn backward(self, loss: NodeId) -> TensorResult<Gradients<T>> {
        let loss_value = &self.values[loss.0];
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut store = GradStore { slots: vec![None; self.values.len()] };
        store.slots[loss.0] = Some(Tensor::full(loss_value.shape(), T::ONE));
        for id in (0..self.values.len()).rev() {
            if self.steps[id].is_none() {
                continue;
            }
            let Some(grad) = store.slots[id].take() else { continue };
            (self.steps[id].as_ref().unwrap())(&self.values, &grad, &mut store);
        }
        Ok(Gradients { slots: store.slots })
    }
}

/// Gradient accumulator used during the reverse pass.
pub struct GradStore<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradStore<T> {
    /// Mutable data of the gradient slot for `id`, zero-initialized with
    /// `shape` on first touch.
    pub fn slot(&mut self, id: NodeId, shape: &[usize]) -> &mut [T] {
        self.slots[id.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
    }
}

/// Gradients surviving a backward pass, indexed by the `NodeId`s of the
/// leaves that produced them.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

/// dst += src, elementwise.
pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d = T::from_f64(d.to_f64() + s.to_f64());
    }
}
