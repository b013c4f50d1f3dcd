//! Dense 64-bit float tensors with reverse-mode automatic differentiation.
//!
//! Every operation builds a node in an implicit computation graph. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and fills the `grad` slot of every participating tensor. Parameters
//! are ordinary leaf tensors created with `requires_grad = true`; they
//! persist across forward passes while intermediate nodes are dropped with
//! the graph.
//!
//! All values are checked for finiteness after every operation: a NaN or
//! infinity surfaces as an error at the op that produced it rather than
//! propagating silently. There is no implicit broadcasting; callers expand
//! shapes explicitly (see [`Tensor::expand_rows`]).

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{LatError, Result};

pub mod cells;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod optim;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Per-parent gradient contributions. `None` marks a parent whose gradient
/// was not requested (constant inputs).
pub(crate) type ParentGrads = Vec<Option<Vec<f64>>>;

/// Context handed to an op's backward function.
pub(crate) struct BackwardCtx<'a> {
    /// d(loss)/d(this node), same length as `out_values`.
    pub out_grad: &'a [f64],
    /// Forward values of this node.
    pub out_values: &'a [f64],
    /// Forward values of each parent, in op order.
    pub parent_values: &'a [&'a [f64]],
    /// Which parents actually need a gradient.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> ParentGrads>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
    consumed: bool,
}

/// A shared handle to a tensor node. Cloning is cheap and aliases the
/// same storage; training is single-writer by convention.
pub struct Tensor(Rc<RefCell<Inner>>);

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("values", &inner.values)
            .finish()
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LatError::NonFinite { op })
    }
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        Tensor(Rc::new(RefCell::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values,
            requires_grad,
            grad: None,
            parents,
            backward_fn,
            consumed: false,
        })))
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(LatError::shape(
                "from_vec",
                format!("shape {:?} holds {} values, got {}", shape, numel, values.len()),
            ));
        }
        check_finite("from_vec", &values)?;
        Ok(Tensor::new_inner(shape.to_vec(), values, false, Vec::new(), None))
    }

    /// Trainable leaf: participates in backward and receives a gradient.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, values)?;
        t.0.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::from_vec(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new_inner(shape.to_vec(), vec![0.0; numel], false, Vec::new(), None)
    }

    pub fn zeros_param(shape: &[usize]) -> Tensor {
        let t = Tensor::zeros(shape);
        t.0.borrow_mut().requires_grad = true;
        t
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new_inner(shape.to_vec(), vec![1.0; numel], false, Vec::new(), None)
    }

    /// Fan-based uniform init on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
        let t = Tensor::new_inner(vec![rows, cols], values, false, Vec::new(), None);
        t.0.borrow_mut().requires_grad = true;
        t
    }

    /// Glorot-initialized vector treated as a `rows x 1` projection.
    pub fn glorot_vec(len: usize, rng: &mut impl rand::Rng) -> Tensor {
        let a = (6.0 / (len + 1) as f64).sqrt();
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-a..=a)).collect();
        let t = Tensor::new_inner(vec![len], values, false, Vec::new(), None);
        t.0.borrow_mut().requires_grad = true;
        t
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Result<Tensor> {
        check_finite(op, &values)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Ok(Tensor::new_inner(shape, values, true, parents, Some(backward_fn)))
        } else {
            Ok(Tensor::new_inner(shape, values, false, Vec::new(), None))
        }
    }

    pub fn id(&self) -> u64 {
        self.0.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Snapshot of the stored values.
    pub fn values(&self) -> Vec<f64> {
        self.0.borrow().values.clone()
    }

    /// Run a closure over the stored values without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.0.borrow().values)
    }

    /// The single stored value of a scalar tensor.
    pub fn value(&self) -> Result<f64> {
        let inner = self.0.borrow();
        if inner.values.len() != 1 {
            return Err(LatError::Contract(format!(
                "value() needs a scalar, got shape {:?}",
                inner.shape
            )));
        }
        Ok(inner.values[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    /// Overwrite stored values in place (optimizer updates, finite differences).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if inner.values.len() != values.len() {
            return Err(LatError::shape(
                "set_values",
                format!("{} stored vs {} given", inner.values.len(), values.len()),
            ));
        }
        check_finite("set_values", values)?;
        inner.values.copy_from_slice(values);
        Ok(())
    }

    /// Add `delta` to one entry; used by the finite-difference oracle.
    pub fn nudge(&self, index: usize, delta: f64) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if index >= inner.values.len() {
            return Err(LatError::Contract(format!(
                "nudge index {} out of range {}",
                index,
                inner.values.len()
            )));
        }
        inner.values[index] += delta;
        Ok(())
    }

    /// Drop any stored gradient and re-arm the node for a fresh backward.
    pub fn zero_grad(&self) {
        let mut inner = self.0.borrow_mut();
        inner.grad = None;
        inner.consumed = false;
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// tensor that participates with `requires_grad = true`.
    ///
    /// Errors if the loss is not scalar, if this graph was already swept,
    /// or if any participating tensor still holds a gradient from an
    /// earlier sweep (there is no silent accumulation; call
    /// [`Tensor::zero_grad`] first).
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.0.borrow();
            if inner.values.len() != 1 {
                return Err(LatError::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    inner.shape
                )));
            }
            if !inner.requires_grad {
                return Err(LatError::Contract(
                    "backward: loss does not depend on any requires_grad tensor".into(),
                ));
            }
            if inner.consumed {
                return Err(LatError::Contract(
                    "backward: graph already consumed; rebuild the forward pass".into(),
                ));
            }
        }

        let order = self.topo_order();
        for t in &order {
            let inner = t.0.borrow();
            if inner.requires_grad && inner.grad.is_some() {
                return Err(LatError::Contract(
                    "backward: a participating tensor already holds a gradient; call zero_grad".into(),
                ));
            }
        }

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let id = t.id();
            let Some(g) = pending.remove(&id) else {
                continue;
            };
            {
                let mut inner = t.0.borrow_mut();
                inner.consumed = true;
                inner.grad = Some(g);
            }
            let inner = t.0.borrow();
            let Some(backward_fn) = &inner.backward_fn else {
                continue;
            };
            let parent_borrows: Vec<std::cell::Ref<'_, Inner>> =
                inner.parents.iter().map(|p| p.0.borrow()).collect();
            let parent_values: Vec<&[f64]> =
                parent_borrows.iter().map(|b| b.values.as_slice()).collect();
            let needs: Vec<bool> = parent_borrows.iter().map(|b| b.requires_grad).collect();
            let ctx = BackwardCtx {
                out_grad: inner.grad.as_ref().expect("grad just stored"),
                out_values: &inner.values,
                parent_values: &parent_values,
                needs: &needs,
            };
            let contribs = backward_fn(&ctx);
            debug_assert_eq!(contribs.len(), inner.parents.len());
            drop(parent_borrows);
            for (parent, contrib) in inner.parents.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                let entry = pending
                    .entry(parent.id())
                    .or_insert_with(|| vec![0.0; contrib.len()]);
                for (acc, c) in entry.iter_mut().zip(&contrib) {
                    *acc += c;
                }
            }
        }
        Ok(())
    }

    /// Post-order over the requires-grad subgraph (iterative; graphs from
    /// unrolled recurrences can be deep).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // stack holds (node, child_index)
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child_idx)) = stack.pop() {
            let next_child = {
                let inner = node.0.borrow();
                inner
                    .parents
                    .iter()
                    .enumerate()
                    .skip(child_idx)
                    .find(|(_, p)| p.requires_grad() && !visited.contains(&p.id()))
                    .map(|(i, p)| (i, p.clone()))
            };
            match next_child {
                Some((i, child)) => {
                    visited.insert(child.id());
                    stack.push((node, i + 1));
                    stack.push((child, 0));
                }
                None => order.push(node),
            }
        }
        order
    }
}

/// Clear gradients on a parameter list.
pub fn zero_grad_all(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_count() {
        let err = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, LatError::ShapeMismatch { .. }));
    }

    #[test]
    fn nan_is_rejected_at_construction() {
        let err = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap_err();
        assert!(matches!(err, LatError::NonFinite { .. }));
    }

    #[test]
    fn backward_product_rule() {
        // loss = x * y -> dx = y, dy = x
        let x = Tensor::param(&[], vec![3.0]).unwrap();
        let y = Tensor::param(&[], vec![5.0]).unwrap();
        let loss = x.mul(&y).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        assert_eq!(y.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn backward_tanh_at_zero_has_unit_slope() {
        let x = Tensor::param(&[], vec![0.0]).unwrap();
        let loss = x.tanh().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0).unwrap();
        let err = y.backward().unwrap_err();
        assert!(matches!(err, LatError::Contract(_)));
    }

    #[test]
    fn repeated_backward_is_an_error() {
        let x = Tensor::param(&[], vec![2.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        let err = loss.backward().unwrap_err();
        assert!(matches!(err, LatError::Contract(_)));
    }

    #[test]
    fn stale_gradient_is_an_error_not_accumulation() {
        let x = Tensor::param(&[], vec![2.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        // second graph over the same leaf without zero_grad
        let loss2 = x.mul(&x).unwrap();
        let err = loss2.backward().unwrap_err();
        assert!(matches!(err, LatError::Contract(_)));
        // after clearing it works and does not accumulate
        x.zero_grad();
        let loss3 = x.mul(&x).unwrap();
        loss3.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn repeated_operand_accumulates_within_one_sweep() {
        // loss = x*x: dx = 2x
        let x = Tensor::param(&[], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }
}
