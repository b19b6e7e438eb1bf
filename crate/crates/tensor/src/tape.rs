//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! Every operation appends one node holding the forward value and, when any
//! input requires a gradient, a closure that scatters the node's output
//! gradient back onto its inputs. `backward` walks the list once in reverse.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::numel;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Gradient accumulator handed to backward closures. Closures must add
/// into the slot they request, never overwrite it, so that nodes consumed
/// by several downstream ops collect every contribution.
pub struct GradSink<'a, T: Scalar> {
    slots: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    /// Gradient buffer for `var`, zero-initialised on first request.
    pub fn accum(&mut self, var: Var, numel: usize) -> &mut [T] {
        self.slots[var.0].get_or_insert_with(|| vec![T::zero(); numel]).as_mut_slice()
    }
}

type BackFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    needs_grad: bool,
    back: Option<BackFn<T>>,
}

/// Recording of one forward computation.
///
/// A tape is built fresh for every training step and discarded afterwards;
/// persistent state (parameters, optimizer moments) lives outside it.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Place a tensor on the tape as a leaf. It participates in backward
    /// only if the tensor was marked with `with_grad(true)`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec().into(), t.requires_grad(), None)
    }

    /// Place a tensor on the tape as a constant that never receives a
    /// gradient regardless of its flag.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec().into(), false, None)
    }

    /// Forward value of a node as a tensor.
    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.to_vec())
            .expect("tape node holds a valid tensor")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Arc<Vec<T>>,
        needs_grad: bool,
        back: Option<BackFn<T>>,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, needs_grad, back });
        Var(self.nodes.len() - 1)
    }

    /// Append an op result with a backward rule. Ops call this only when at
    /// least one input needs a gradient; otherwise use [`Tape::record_value`].
    pub(crate) fn record(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        back: impl Fn(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Var {
        self.push(shape, value.into(), true, Some(Box::new(back)))
    }

    /// Append an op result that is a dead end for gradients.
    pub(crate) fn record_value(&mut self, shape: Vec<usize>, value: Vec<T>) -> Var {
        self.push(shape, value.into(), false, None)
    }

    /// Like [`Tape::record`] for ops that also want to keep a shared handle
    /// to the output value inside their backward closure.
    pub(crate) fn record_arc(
        &mut self,
        shape: Vec<usize>,
        value: Arc<Vec<T>>,
        back: impl Fn(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Var {
        self.push(shape, value, true, Some(Box::new(back)))
    }

    /// Shared value snapshot used by backward closures that need the
    /// forward data of an input or output.
    pub(crate) fn value_arc(&self, v: Var) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Reverse sweep from a single-element root. Returns the gradient of
    /// the root with respect to every node reached by the chain rule.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_size = self.numel(root);
        if root_size != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("root must hold one element, got {root_size}"),
            ));
        }
        let mut slots: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        slots.resize_with(root.0 + 1, || None);
        slots[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(back) = self.nodes[id].back.as_ref() else { continue };
            let Some(gout) = slots[id].take() else { continue };
            let (lower, _) = slots.split_at_mut(id);
            back(&gout, &mut GradSink { slots: lower });
            slots[id] = Some(gout);
        }
        let shapes = self.nodes[..=root.0].iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { slots, shapes })
    }
}

/// Result of a backward sweep.
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var` if any contribution reached it.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let buf = self.slots.get(var.0)?.as_ref()?;
        Some(
            Tensor::from_vec(self.shapes[var.0].clone(), buf.clone())
                .expect("gradient matches node shape"),
        )
    }

    /// Gradient for `var`, zero-filled when nothing reached it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        self.get(var).unwrap_or_else(|| {
            let shape = self.shapes.get(var.0).cloned().unwrap_or_default();
            Tensor::zeros(shape)
        })
    }
}
