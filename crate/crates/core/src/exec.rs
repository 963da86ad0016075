//! Data-parallel execution with a sequential fallback.
//!
//! Every parallel loop in the crate maps over an index range or a slice and
//! collects results in input order, so reductions performed afterwards are
//! independent of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops are run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Use the rayon thread pool (sequential when the `parallel` feature is off).
    #[default]
    Parallel,
    /// Run on the calling thread.
    Sequential,
}

impl Execution {
    /// Whether this mode actually runs on the thread pool in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over a slice, returning results in input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }
}
