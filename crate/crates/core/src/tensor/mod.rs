//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations execute eagerly and record a backward closure linking the
//! output to its parents, so the graph is an implicit tape ordered by node
//! id. [`Tensor::backward`] replays reachable nodes in reverse execution
//! order. Graph construction and backward are single-threaded; kernels may
//! parallelize internally over data without affecting results.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub mod gradcheck;
mod kernels;
pub mod math;
mod ops;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Arguments: (gradient of the output, values of the output). Passing the
/// output values in avoids capturing the output tensor inside its own
/// closure, which would leak the node through an Rc cycle.
type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to a node on the tape. Cloning is cheap and aliases the node.
pub struct Tensor {
    node: Rc<Node>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Overflow of an op on finite inputs is an error, not a silent value.
/// The |x| sum cannot overflow for the magnitudes this engine produces,
/// and it goes NaN/infinite exactly when the buffer contains NaN/Inf.
fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    // |x| sums stay finite iff every element is finite (NaN and inf both
    // poison the total); eight independent lanes let the loop vectorize,
    // which matters because this runs on every op output
    let mut acc = [0.0f64; 8];
    let mut chunks = data.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] += c[i].abs();
        }
    }
    let mut sum: f64 = chunks.remainder().iter().map(|x| x.abs()).sum();
    for lane in acc {
        sum += lane;
    }
    if sum.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    fn new_node(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(&shape));
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(Error::shape(
                "constant",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self::new_node(data, shape.to_vec(), false, vec![], None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(Error::shape(
                "param",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self::new_node(data, shape.to_vec(), true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::new_node(vec![0.0; numel_of(shape)], shape.to_vec(), false, vec![], None)
    }

    /// A grad-stopped copy: same values, no history, never requires grad.
    pub fn detach(&self) -> Tensor {
        Self::new_node(self.to_vec(), self.node.shape.clone(), false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::new_node(vec![v], vec![1], false, vec![], None)
    }

    /// Shared construction path for every recorded operation.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        op: &'static str,
        bwd: impl Fn(&[f64], &[f64]) + 'static,
    ) -> Result<Tensor> {
        check_finite(&data, op)?;
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(bwd)) } else { None };
        Ok(Self::new_node(data, shape, requires_grad, parents, backward))
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Borrow of the underlying buffer, row-major.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.node.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.node.shape
            )));
        }
        Ok(self.node.data.borrow()[0])
    }

    /// Accumulated gradient, if backward has produced one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite the buffer in place. Only legal between training steps:
    /// any recorded graph still holding this tensor would silently see the
    /// new values, so callers drop graphs before updating parameters.
    pub fn set_data(&self, new: &[f64]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("{} values for shape {:?}", new.len(), self.node.shape),
            ));
        }
        self.node.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Repeated calls on the same graph are permitted and produce identical
    /// gradients: every reachable gradient buffer is cleared before the
    /// sweep, so nothing accumulates across calls. Intermediate gradients
    /// are dropped as soon as their node has been processed; only leaf
    /// tensors keep `grad` populated afterwards.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node.shape
            )));
        }
        if !self.node.requires_grad {
            return Err(Error::Contract(
                "backward on a tensor with no gradient-tracked inputs".into(),
            ));
        }

        // Reachable subgraph, restricted to gradient-tracked nodes. Parents
        // always carry smaller ids than children (ops record on execution),
        // so descending id order is a valid reverse topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.node.id);
        while let Some(t) = stack.pop() {
            for p in &t.node.parents {
                if p.node.requires_grad && seen.insert(p.node.id) {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.node.id.cmp(&a.node.id));

        for t in &order {
            *t.node.grad.borrow_mut() = None;
        }
        *self.node.grad.borrow_mut() = Some(vec![1.0]);

        for t in &order {
            if let Some(f) = &t.node.backward {
                // Take, not borrow: the node's own gradient is complete once
                // we reach it, and freeing it here caps backward memory.
                let g = t.node.grad.borrow_mut().take();
                if let Some(g) = g {
                    let out = t.node.data.borrow();
                    f(&g, &out);
                }
            }
        }
        Ok(())
    }
}

/// Add into `t`'s gradient buffer, allocating zeros on first touch.
pub(crate) fn acc_grad(t: &Tensor, add: impl FnOnce(&mut [f64])) {
    if !t.node.requires_grad {
        return;
    }
    let mut slot = t.node.grad.borrow_mut();
    let buf = slot.get_or_insert_with(|| vec![0.0; t.numel()]);
    add(buf);
}
