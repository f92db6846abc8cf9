//! Sparse-to-dense depth completion with a learned conditional prior.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! two networks ([`networks`]), training objectives ([`losses`]), stereo
//! geometry ([`geometry`]), synthetic data ([`data`]), evaluation
//! ([`metrics`]) and the training/evaluation drivers ([`harness`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
mod fsutil;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Shape, Tensor, Var};
