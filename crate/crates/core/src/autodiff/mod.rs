//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Gradients are recorded as ordinary tape nodes, so a loss that contains a
//! gradient (an input-gradient penalty, for instance) can itself be
//! differentiated with respect to the parameters.
//!
//! Conventions:
//! - ReLU has derivative 0 at exactly 0.
//! - Second derivatives of ReLU, `abs` and `sign` are taken as 0; the
//!   distributional term at the kink is dropped.
//! - Everything is `f64`.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_tape_gradient, finite_difference_check, FdCoordinate, FdOptions, FdReport};
pub use tape::{CustomOp, NodeId, Role, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch at node #{node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("gradient target #{node} has shape {shape:?}; a scalar is required")]
    NonScalarTarget { node: usize, shape: Vec<usize> },
    #[error("no second-order rule registered for {op} (node #{node})")]
    UnsupportedOp { node: usize, op: String },
    #[error("node #{0} is not a leaf and cannot be rebound")]
    NotALeaf(usize),
    #[error("binding for leaf #{node} has shape {got:?}, expected {expected:?}")]
    BindingShape {
        node: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node #{0} does not exist on this tape")]
    UnknownNode(usize),
    #[error("function value is not finite at coordinate {coordinate} (value {value})")]
    NonFinite { coordinate: usize, value: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}
