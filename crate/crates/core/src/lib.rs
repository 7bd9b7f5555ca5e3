// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod error;
pub mod fpca;
pub mod inference;
pub mod funcdata;
pub mod linalg;
pub mod model;
pub mod sim;

pub use error::{Error, Result};
