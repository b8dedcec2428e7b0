//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the maps run on rayon; without it
//! they run on the current thread. Results are collected in input order, so
//! every reduction downstream folds in a fixed order and output is
//! bit-identical whichever path executes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over a slice, collecting results in input order.
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential twin of [`map_collect`]; always single-threaded. The benches
/// compare the two.
pub fn map_collect_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Map over `0..n`, collecting results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
