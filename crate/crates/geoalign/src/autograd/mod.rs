//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The op set is deliberately closed: everything the encoders, region
//! pooling, and losses need, and nothing else. Shapes are validated eagerly
//! and mismatches are hard errors. Broadcasting is restricted to bias rows
//! and scalars.
//!
//! A [`Tensor`] is an immutable value (data behind an `Arc`) and is safe to
//! move across threads. A [`Tape`] records one forward execution and supports
//! exactly one backward pass; data parallelism is expressed as independent
//! tapes whose leaf gradients the caller sums.

mod tape;
#[cfg(test)]
mod tests;

pub use tape::{Gradients, Tape};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Guard for `exp` overflow: inputs are clamped to this value.
pub(crate) const EXP_CLAMP: f64 = 709.0;
/// Guard for `log` of non-positive values.
pub(crate) const LOG_FLOOR: f64 = 1e-300;
/// Guard magnitude for reciprocal denominators.
pub(crate) const RECIP_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({expected})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    #[error("tensor data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("tensor belongs to a different tape")]
    CrossTape,
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("tensor is not registered on this tape")]
    NotOnTape,
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle tying a tensor to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape_id: u64,
    pub(crate) index: usize,
}

/// Dense row-major f64 tensor. A scalar has the empty shape `[]`.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
            requires_grad: false,
            node: None,
        }
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeRef, requires_grad: bool) -> Self {
        self.node = Some(node);
        self.requires_grad = requires_grad;
        self
    }

    /// Same value with no tape affiliation, for use as an input to another
    /// tape.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    /// Same data, new shape. Fails if the element count differs.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::DataLength {
                expected,
                got: self.numel(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            node: None,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Strict equality of shape and all bits of the data.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
