//! Physics-informed neural networks for dynamic linear elasticity.

// `!(a < b)` deliberately treats NaN as invalid.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod layout;
pub mod network;
pub mod physics;
pub mod sampling;
pub mod scenarios;
pub mod training;
pub mod verify;
