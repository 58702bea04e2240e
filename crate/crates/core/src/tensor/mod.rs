//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the persistent value type: parameters, dataset rows,
//! extracted results. [`Tape`] records a define-by-run computation graph
//! over tensor values and plays it backwards once to produce gradients.
//! [`AdamState`] consumes the gradients written back into parameter
//! tensors.

mod adam;
mod tape;

pub use adam::AdamState;
pub use tape::{NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: domain error: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("gradient unavailable: {0}")]
    NoGrad(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional f64 array in row-major order.
///
/// A tensor with `requires_grad` keeps a same-shape gradient buffer that
/// optimizers consume; tensors without it never allocate one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Plain value tensor (no gradient buffer).
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape requires {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Trainable tensor: `requires_grad` set, gradient buffer zeroed.
    pub fn param(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let mut t = Tensor::new(data, shape)?;
        t.grad = Some(vec![0.0; t.data.len()]);
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let numel = self.data.len();
        let grad = self
            .grad
            .as_mut()
            .ok_or_else(|| TensorError::NoGrad("tensor does not require grad".into()))?;
        if delta.len() != numel {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: vec![numel],
                rhs: vec![delta.len()],
            });
        }
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }
}

pub(crate) fn ensure_all_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}
