//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The graph is a dynamic tape: every operation appends a node holding the
//! forward value and, when gradients are enabled, a backward closure. Nodes
//! only ever reference earlier nodes, so the reverse sweep is a single
//! backwards pass over the tape. The tape is built per forward pass and
//! dropped after the optimizer step; parameters live outside it in a
//! [`checkpoint::ParamStore`] and are re-leafed each iteration.

pub mod checkpoint;
pub mod finite_diff;
pub mod kernels;
mod ops;

use std::cell::{Ref, RefCell};

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
}

/// Handle to a node on a [`Tape`]. Cheap to copy; only valid for the tape
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef {
    pub(crate) id: usize,
}

pub type BackFn<T> = Box<dyn Fn(&mut BackCtx<'_, T>)>;

/// View handed to backward closures: read-only forward values, the upstream
/// gradient of the node being differentiated, and mutable access to the
/// gradient buffers of earlier nodes.
pub struct BackCtx<'a, T: Scalar> {
    pub values: &'a [Vec<T>],
    pub shapes: &'a [Vec<usize>],
    pub up: &'a [T],
    grads: &'a mut [Option<Vec<T>>],
    requires: &'a [bool],
}

impl<'a, T: Scalar> BackCtx<'a, T> {
    /// Whether node `t` participates in gradient flow at all.
    pub fn wants(&self, t: TensorRef) -> bool {
        self.requires[t.id]
    }

    /// Gradient buffer of `t`, zero-initialized on first touch.
    pub fn accum(&mut self, t: TensorRef) -> &mut [T] {
        let size = self.values[t.id].len();
        let slot = &mut self.grads[t.id];
        if slot.is_none() {
            *slot = Some(vec![T::ZERO; size]);
        }
        slot.as_mut().unwrap()
    }

    pub fn value(&self, t: TensorRef) -> &'a [T] {
        &self.values[t.id]
    }

    pub fn shape(&self, t: TensorRef) -> &'a [usize] {
        &self.shapes[t.id]
    }
}

struct Inner<T: Scalar> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    backs: Vec<Option<BackFn<T>>>,
}

pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward closures (training / gradient checks).
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// Tape that only evaluates forward values (inference, benchmarks).
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            inner: RefCell::new(Inner {
                shapes: Vec::new(),
                values: Vec::new(),
                grads: Vec::new(),
                requires: Vec::new(),
                backs: Vec::new(),
            }),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, requires: bool) -> TensorRef {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.shapes.push(shape);
        inner.values.push(data);
        inner.grads.push(None);
        inner.requires.push(requires && self.grad_enabled);
        inner.backs.push(None);
        TensorRef { id }
    }

    /// Node with no gradient flow.
    pub fn constant(&self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> TensorRef {
        self.push(shape.into(), data, false)
    }

    pub fn scalar(&self, v: T) -> TensorRef {
        self.constant(vec![], vec![v])
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn leaf(&self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> TensorRef {
        self.push(shape.into(), data, true)
    }

    /// Low-level node constructor for fused/custom operations. The backward
    /// closure is attached afterwards with [`Tape::set_back`] so it can
    /// capture the returned handle.
    pub fn push_custom(
        &self,
        shape: impl Into<Vec<usize>>,
        data: Vec<T>,
        requires: bool,
    ) -> TensorRef {
        self.push(shape.into(), data, requires)
    }

    pub fn set_back(&self, t: TensorRef, back: BackFn<T>) {
        let mut inner = self.inner.borrow_mut();
        if inner.requires[t.id] {
            inner.backs[t.id] = Some(back);
        }
    }

    pub fn requires(&self, t: TensorRef) -> bool {
        self.inner.borrow().requires[t.id]
    }

    pub fn any_requires(&self, ts: &[TensorRef]) -> bool {
        let inner = self.inner.borrow();
        ts.iter().any(|t| inner.requires[t.id])
    }

    pub fn shape(&self, t: TensorRef) -> Vec<usize> {
        self.inner.borrow().shapes[t.id].clone()
    }

    pub fn numel(&self, t: TensorRef) -> usize {
        self.inner.borrow().values[t.id].len()
    }

    /// Borrowed view of the forward value.
    pub fn data(&self, t: TensorRef) -> Ref<'_, [T]> {
        Ref::map(self.inner.borrow(), |inner| inner.values[t.id].as_slice())
    }

    pub fn to_vec(&self, t: TensorRef) -> Vec<T> {
        self.inner.borrow().values[t.id].clone()
    }

    pub fn value_f64(&self, t: TensorRef) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.values[t.id].len(), 1);
        inner.values[t.id][0].to_f64()
    }

    /// Gradient of `t` accumulated by the last backward pass, if any.
    pub fn grad(&self, t: TensorRef) -> Option<Vec<T>> {
        self.inner.borrow().grads[t.id].clone()
    }

    /// Detached copy: same value, no gradient history.
    pub fn detach(&self, t: TensorRef) -> TensorRef {
        let (shape, data) = {
            let inner = self.inner.borrow();
            (inner.shapes[t.id].clone(), inner.values[t.id].clone())
        };
        self.constant(shape, data)
    }

    pub fn clear_grads(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// reachable requires-grad node; repeated calls keep accumulating until
    /// [`Tape::clear_grads`].
    pub fn backward(&self, loss: TensorRef) -> Result<(), NumericsError> {
        {
            let inner = self.inner.borrow();
            if inner.values[loss.id].len() != 1 {
                return Err(NumericsError::Contract(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    inner.shapes[loss.id]
                )));
            }
        }
        let mut inner = self.inner.borrow_mut();
        let Inner {
            shapes,
            values,
            grads,
            requires,
            backs,
        } = &mut *inner;
        // Sweep into pass-local buffers so repeated backward calls do not
        // re-propagate gradients retained from earlier passes.
        let mut pass: Vec<Option<Vec<T>>> = vec![None; values.len()];
        pass[loss.id] = Some(vec![T::ONE]);
        for id in (0..=loss.id).rev() {
            if backs[id].is_none() {
                continue;
            }
            let Some(up) = pass[id].take() else { continue };
            {
                let mut ctx = BackCtx {
                    values,
                    shapes,
                    up: &up,
                    grads: &mut pass,
                    requires,
                };
                (backs[id].as_ref().unwrap())(&mut ctx);
            }
            pass[id] = Some(up);
        }
        for (slot, fresh) in grads.iter_mut().zip(pass) {
            let Some(fresh) = fresh else { continue };
            match slot {
                Some(g) => {
                    for (dst, src) in g.iter_mut().zip(&fresh) {
                        *dst += *src;
                    }
                }
                none => *none = Some(fresh),
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::Contract(_))
        ));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0]);
        let sq = tape.mul(x, x);
        let loss = tape.reduce_sum(sq, None);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0]);
        let c = tape.scalar(3.0);
        tape.backward(c).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1], vec![3.0]);
        let y = tape.mul(x, x);
        let loss = tape.reduce_sum(y, None);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![12.0]);
        tape.clear_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![6.0]);
    }

    #[test]
    fn shared_subexpression_sums_paths() {
        // loss = x*x + x  =>  dloss/dx = 2x + 1
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1], vec![4.0]);
        let sq = tape.mul(x, x);
        let s = tape.add(sq, x);
        let loss = tape.reduce_sum(s, None);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![9.0]);
    }
}
