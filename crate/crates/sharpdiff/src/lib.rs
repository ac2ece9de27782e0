//! Hessian-based sharpness analysis for diffusion models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diffusion;
mod error;
pub mod field;
pub mod gmm;
pub mod harness;
pub mod metrics;
pub mod random;
pub mod sail;
pub mod scorenet;
pub mod spectral;

pub use error::{Error, Result};
