#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod continual;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod network;

pub use error::{Error, Result};
