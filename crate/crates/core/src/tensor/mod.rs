//! Dense f64 tensors with a reverse-mode autodiff graph.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Every op that
//! consumes a tensor requiring gradients records a backward closure on the
//! produced node; [`backward`] walks those nodes in reverse topological order
//! and returns a [`Gradients`] map keyed by leaf node id. Nothing is mutated
//! during the sweep, so the graph (the "tape") lives exactly as long as the
//! tensors of one forward pass and is freed when they drop.

mod backward;
pub mod gradcheck;
mod kernels;
mod ops;
pub mod optim;
pub mod params;
pub mod rng;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use backward::{backward, Gradients};
pub use kernels::{gemm, gemm_nt, gemm_tn};
pub use ops::sigmoid_scalar;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use rng::SeededRng;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range in {op} (extent {extent})")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Opaque handle identifying a node of the autodiff graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> NodeId {
    NodeId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording backward closures. Used for inference.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Receives `(output values, upstream gradient)` and returns one gradient per
/// input, `None` where the input does not require one.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct GradFn {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

pub(crate) struct Node {
    id: NodeId,
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.0.dims)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op))
            .finish()
    }
}

impl Tensor {
    /// Builds a constant leaf; `dims` must be non-empty, positive and match `data`.
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) || expected != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                lhs: dims.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::leaf(dims.to_vec(), data, false))
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Self::leaf(vec![n], data, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::leaf(dims.to_vec(), vec![0.0; dims.iter().product()], false)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        Self::leaf(dims.to_vec(), vec![value; dims.iter().product()], false)
    }

    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::Contract("ragged matrix rows".into()));
        }
        Self::new(&[m, n], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    fn leaf(dims: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            id: fresh_id(),
            dims,
            data,
            requires_grad,
            grad_fn: None,
        }))
    }

    /// Returns a leaf with the same values that participates in gradients.
    pub fn requires_grad(self) -> Self {
        if self.0.requires_grad && self.0.grad_fn.is_none() {
            return self;
        }
        Self::leaf(self.0.dims.clone(), self.0.data.clone(), true)
    }

    /// Returns a constant copy cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.dims.clone(), self.0.data.clone(), false)
    }

    pub(crate) fn from_op(
        op: &'static str,
        dims: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.0.requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            inputs,
            backward,
        });
        Ok(Tensor(Arc::new(Node {
            id: fresh_id(),
            dims,
            data,
            requires_grad,
            grad_fn,
        })))
    }

    pub fn id(&self) -> NodeId {
        self.0.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.0.dims
    }

    pub fn rank(&self) -> usize {
        self.0.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn shape2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.dims.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(TensorError::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.0.dims.last().unwrap();
        &self.0.data[i * n..(i + 1) * n]
    }

    /// Applies `f` to the values of a leaf in place, keeping its node id.
    /// Used by optimizers; copies the buffer if the node is shared.
    pub(crate) fn update_leaf(&mut self, f: impl FnOnce(&mut [f64])) {
        debug_assert!(self.is_leaf());
        if let Some(node) = Arc::get_mut(&mut self.0) {
            f(&mut node.data);
            return;
        }
        let mut data = self.0.data.clone();
        f(&mut data);
        self.0 = Arc::new(Node {
            id: self.0.id,
            dims: self.0.dims.clone(),
            data,
            requires_grad: self.0.requires_grad,
            grad_fn: None,
        });
    }

    /// Replaces the values of a leaf, keeping id and shape.
    pub(crate) fn set_leaf_data(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.numel());
        self.update_leaf(|d| d.copy_from_slice(values));
    }
}
