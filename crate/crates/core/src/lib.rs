#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod driver;
pub mod energy;
pub mod env;
pub mod error;
pub mod filter;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sets;
pub mod td3;

pub use error::{Error, Result};
