//! Dense `f64` tensors, reverse-mode differentiation, and the Adam optimizer.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, finite_difference, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use tape::{concat, Gradients, ParamId, ParamSet, Tape, Var, PROB_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected rank {expected}, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for extent {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("label {0} is not binary")]
    NonBinaryLabel(f64),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

/// Binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(p: f64, y: f64) -> Result<f64, NumericsError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NumericsError::ProbabilityOutOfRange(p));
    }
    if y != 0.0 && y != 1.0 {
        return Err(NumericsError::NonBinaryLabel(y));
    }
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}
