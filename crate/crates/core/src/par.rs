//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (default), `ExecPolicy::Auto` fans work out
//! over rayon; results are collected in input order, so parallel and
//! sequential execution produce identical output. Without the feature, both
//! policies run sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecPolicy {
    /// Parallel when the `parallel` feature is enabled, sequential otherwise.
    #[default]
    Auto,
    Sequential,
}

pub fn map_collect<T, U, F>(policy: ExecPolicy, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match policy {
        ExecPolicy::Sequential => items.iter().map(f).collect(),
        ExecPolicy::Auto => {
            #[cfg(feature = "parallel")]
            {
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().map(f).collect()
            }
        }
    }
}

/// Order-preserving indexed map over `0..n`.
pub fn map_indices<U, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match policy {
        ExecPolicy::Sequential => (0..n).map(f).collect(),
        ExecPolicy::Auto => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}
