//! Dense tensors and a closed set of differentiable primitives.
//!
//! A model is expressed as an [`Expr`]: a graph of [`Op`] nodes whose leaves
//! are named inputs (parameters) and literal constants. [`Expr::forward`]
//! evaluates every node against a set of [`Bindings`];
//! [`Evaluation::backward`] runs the reverse sweep. Evaluation is strictly
//! sequential, so repeated evaluations are bitwise identical.
//!
//! Every produced value is checked for NaN/Inf; a non-finite value aborts
//! evaluation with the offending node instead of propagating.

mod check;
mod eval;
mod expr;
mod real;
mod tensor;

pub use check::{finite_difference_check, FdConfig};
pub use eval::{evaluate, gradients, Bindings, Evaluation};
pub use expr::{Expr, Node, NodeId, Op};
pub use real::{DType, Real};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in {op} at node {node}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, node: usize, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid argument to {op} at node {node}: {reason}")]
    InvalidArgument { op: &'static str, node: usize, reason: String },
    #[error("masked softmax at node {node}: row {row} has no unmasked entry")]
    FullyMaskedRow { node: usize, row: usize },
    #[error("cross-entropy with every position masked")]
    AllMasked,
    #[error("unbound input `{name}`")]
    Unbound { name: String },
    #[error("input `{name}` declared with shape {expected:?} but bound to {found:?}")]
    BindingShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("`{name}` is not an input of this graph")]
    NotInGraph { name: String },
}
