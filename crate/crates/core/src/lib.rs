//! Teacher-student knowledge distillation for small visual-prefix language models.
//!
//! Everything here needs only `alloc`. Enable the default `std` feature for
//! faster math and SIMD kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod ablation;
pub mod autodiff;
pub mod data;
mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub(crate) mod math;
pub mod model;
pub mod train;

pub use error::{Error, Result};
