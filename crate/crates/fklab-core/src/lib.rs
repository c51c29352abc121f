//! Finite-difference laboratory for one-dimensional diffusion with FK
//! (fourth-type) boundary conditions coupled to a dynamic boundary unknown.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod extension;
pub mod fk_operator;
pub mod grid;
pub mod resolvent;
pub mod spectral;

pub use error::{FkError, Result};
