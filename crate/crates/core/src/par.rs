//! Data-parallel helpers.
//!
//! Every batch loop in the crate goes through [`map_indexed`] so that the
//! sequential and rayon paths produce identical, index-ordered output. The
//! `Parallelism` argument lets callers (and the benches) pick a path at
//! runtime; without the `parallel` feature `Rayon` silently degrades to
//! sequential execution.

/// Execution strategy for batch loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// True when rayon is compiled in and selected.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, mode: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Map `f` over a slice, collecting results in order.
pub fn map_slice<S, T, F>(items: &[S], mode: Parallelism, f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indexed(items.len(), mode, |i| f(&items[i]))
}

/// Like [`map_indexed`] but short-circuits on the first error in index order.
pub fn try_map_indexed<T, E, F>(n: usize, mode: Parallelism, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, mode, f).into_iter().collect()
}

/// Configure the global rayon pool. Returns false if it was already built.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
