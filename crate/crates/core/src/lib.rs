#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod banded;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod inversion;
pub mod linalg;
pub mod pals;
pub mod rom;
pub mod scalar;
pub mod sketch;
pub mod solver;
pub mod sparse;
pub mod transfer;

pub use error::{Error, Result};
