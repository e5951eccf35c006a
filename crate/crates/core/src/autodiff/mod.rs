//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! The model code records a computation onto a [`Tape`] through shape-checked
//! builder methods (one node per primitive), reads forward values eagerly,
//! and calls [`Tape::backward`] once to populate gradients. Broadcasting is
//! never implicit: elementwise ops demand identical shapes and
//! [`Tape::broadcast`] records the expansion as its own node so the backward
//! pass knows which axes to sum over.
//!
//! [`ParameterStore`] owns the trainable arrays between tapes; a training
//! step is attach → forward → backward → collect → Adam update.

mod array;
mod store;
mod tape;

use std::error::Error;
use std::fmt;

pub use array::Array;
pub use store::ParameterStore;
pub use tape::{NodeId, Tape};

pub(crate) use array::matmul_2d;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AutodiffError {
    /// Operand shapes do not satisfy the op's contract; `details` spells out
    /// the shapes involved.
    ShapeMismatch { op: &'static str, details: String },
    /// `backward` called twice on the same tape.
    StaleTape,
    /// A parameter name was registered twice.
    DuplicateParameter { name: String },
    /// Lookup of a name the store has never seen.
    UnknownParameter { name: String },
    /// `adam_step` called before gradients were collected.
    MissingGradient { name: String },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, details } => {
                write!(f, "shape mismatch in {op}: {details}")
            }
            Self::StaleTape => {
                write!(f, "tape already differentiated; record a new forward pass")
            }
            Self::DuplicateParameter { name } => {
                write!(f, "parameter {name:?} already registered")
            }
            Self::UnknownParameter { name } => write!(f, "no parameter named {name:?}"),
            Self::MissingGradient { name } => {
                write!(f, "no gradient collected for parameter {name:?}")
            }
        }
    }
}

impl Error for AutodiffError {}
