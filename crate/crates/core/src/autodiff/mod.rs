//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! Values live on a [`Tape`]; each primitive appends a node recording its
//! inputs, and [`Tape::backward`] applies the chain rule from a scalar root.
//! Trainable tensors are kept in a [`ParamStore`] and bound onto a fresh tape
//! for every forward pass.
//!
//! Binary elementwise primitives broadcast with trailing-dimension
//! alignment: shapes are right-aligned and each axis must either match or
//! have extent 1.

mod gradcheck;
mod nn;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{check_params, relative_error, GradCheckOptions, GroupReport};
pub use nn::{init_layer_norm, init_linear, layer_norm, linear, Dropout};
pub use params::{Param, ParamStore};
pub use real::{lit, DType, Real};
pub use tape::{concat, sum_all, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};

/// Negative slope of the leaky rectifier used for graph learning.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
