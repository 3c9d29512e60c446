//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Every op returns a new immutable [`Tensor`]. When any input requires a
//! gradient the output records its parents and a backward closure; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! creation order and accumulates gradients into the leaves.
//!
//! Checked mode (on by default, per thread) makes every op fail with
//! [`Error::NonFinite`] as soon as it produces NaN or Inf.

mod conv;
mod gradcheck;
mod io;
mod ops;
mod sample;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use conv::{conv2d, conv3d, Conv2dOptions, Conv3dOptions};
pub use gradcheck::{
    central_difference, grad_check, grad_check_subset, op_suite, relative_error, GradCheckReport, OpCheck,
    COMPOSITE_TOLERANCE, ELEMENTWISE_TOLERANCE, SUITE_STEP,
};
pub use io::{read_tensor, write_tensor, TENSOR_MAGIC};
pub use ops::HUBER_DELTA;
pub use sample::{avg_pool2d, grid_sample_bilinear, upsample_bilinear, SampleGrid};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static CHECKED: Cell<bool> = const { Cell::new(true) };
}

/// Enable or disable the NaN/Inf trap for ops run on the current thread.
pub fn set_checked(on: bool) {
    CHECKED.with(|c| c.set(on));
}

pub fn is_checked() -> bool {
    CHECKED.with(|c| c.get())
}

/// Gradient contributions for each parent, `None` where the parent does not
/// require a gradient.
pub(crate) type ParentGrads = Vec<Option<Vec<f64>>>;
type BackwardFn = Box<dyn Fn(&[f64]) -> ParentGrads + Send + Sync>;

struct Node {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    grad: Mutex<Option<Vec<f64>>>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op: "leaf",
            shape,
            data,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            grad: Mutex::new(None),
        })))
    }

    /// A constant tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// A trainable leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
            .expect("length matches shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![], vec![value], false).expect("scalar")
    }

    /// Build an op output. Parents that do not require gradients are kept
    /// only when some other parent does.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> ParentGrads + Send + Sync + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{op} produced a mis-sized buffer");
        if is_checked() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            shape,
            data,
            requires_grad,
            parents,
            backward,
            grad: Mutex::new(None),
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this tensor (`"leaf"` for inputs).
    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "item() needs a single-element tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Accumulated gradient, if backward has reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Detached copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), false).expect("same shape")
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode sweep from this scalar. Gradients of leaves that require
    /// them are added to whatever they already hold.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, shape is {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::InvalidState(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        let graph = Graph::from_root(self);
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);

        for node in graph.nodes.iter().rev() {
            let Some(grad_out) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad_out).for_each(|(a, g)| *a += g),
                        None => *slot = Some(grad_out),
                    }
                }
                Some(backward) => {
                    let grads = backward(&grad_out);
                    debug_assert_eq!(grads.len(), node.0.parents.len());
                    for (parent, grad) in node.0.parents.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), parent.numel(), "{}", node.0.op);
                        match pending.get_mut(&parent.0.id) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                            None => {
                                pending.insert(parent.0.id, grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// The recorded operations reachable from a root, in execution order.
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    pub fn from_root(root: &Tensor) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![root.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.0.id) {
                continue;
            }
            stack.extend(t.0.parents.iter().cloned());
            nodes.push(t);
        }
        // Ids are handed out at creation, so sorting by id is execution order.
        nodes.sort_by_key(|t| t.0.id);
        Graph { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in execution order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|t| t.op()).collect()
    }
}
