//! Dense f64 reverse-mode automatic differentiation.
//!
//! A [`Tape`] records eagerly evaluated operations on rank-2 [`Tensor`]s;
//! [`Tape::backward`] returns [`Gradients`] keyed by [`Var`]. Parameters live
//! in a [`ParamStore`], which also owns the checkpoint format.

pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_entries, GradCheckConfig, GradCheckReport};
pub use params::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
