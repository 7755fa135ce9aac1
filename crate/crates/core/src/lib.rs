// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controls;
pub mod device;
pub mod entangler;
pub mod error;
pub mod hilbert;
pub mod objective;
pub mod optimize;
pub mod propagate;

pub use error::{Error, Result};
