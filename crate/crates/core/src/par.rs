//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature these fan out over the ambient rayon pool;
//! without it they run sequentially. Results are always collected in input
//! order, so output never depends on the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, preserving index order.
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

/// Maps `f` over a slice, preserving element order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
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

/// Fallible variant of [`map_slice`]; the first error in input order wins.
pub fn try_map_slice<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map_slice(items, f).into_iter().collect()
}

/// Runs `f` inside a pool with `threads` workers (0 = rayon default).
///
/// Without the `parallel` feature the closure simply runs on the caller.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
