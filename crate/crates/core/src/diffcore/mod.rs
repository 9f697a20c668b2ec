//! Small reverse-mode differentiation engine.
//!
//! Operations evaluate eagerly and append a record to a [`Graph`]; the reverse
//! pass visits the records in exact reverse order. Every backward rule is
//! written by hand and covered by finite-difference checks (see
//! [`grad_check`]). The same code runs in `f32` for training and `f64` for
//! checking.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Fault, Graph, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected a scalar output, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Default negative slope of the MLP activations.
pub const LEAKY_SLOPE: f64 = 0.01;
