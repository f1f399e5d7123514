//! Pluggable data parallelism.
//!
//! The core runs everything through an [`Executor`] so the std companion can
//! supply a thread pool. Results come back in index order, and callers reduce
//! them sequentially, so outputs never depend on the worker count.

use alloc::vec::Vec;

pub trait Executor: Sync {
    /// Evaluates `f(0..n)` and returns the results in index order.
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
