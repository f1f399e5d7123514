//! File formats, thread pool, gradient checks and command line for the
//! `vlkd-core` distillation engine.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod gradcheck;
pub mod pool;
pub mod presets;
pub mod report;
pub mod runlog;

pub use error::{Error, Result};
