//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every operation whose inputs include a tracked tensor.
//! [`Tape::backward`] walks the recorded nodes in exact reverse creation
//! order and returns [`Gradients`] keyed by node. Only scalar-vs-tensor
//! broadcasting is supported; any other shape disagreement is an error.
//!
//! ```
//! use permtpp::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.var(&[3], vec![1.0, 2.0, 3.0]).unwrap();
//! let sq = tape.mul(&x, &x).unwrap();
//! let y = tape.sum(&sq, None).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod tape;
mod tensor;


pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape};
pub use tensor::{NodeId, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    Construction { shape: Vec<usize>, len: usize },
    #[error("{op}: tensor belongs to a different tape")]
    ForeignTensor { op: &'static str },
    #[error("backward root must have exactly one element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root is not tracked by any tape")]
    UntrackedRoot,
    #[error("function value is not finite at probe point (coordinate {coord})")]
    NonFinite { coord: usize },
}
