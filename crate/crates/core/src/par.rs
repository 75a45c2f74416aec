//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps run on rayon; without it they are
//! plain iterators. In both cases results come back in input order, and every
//! reduction in the crate folds those results sequentially, so outputs are
//! bit-identical across feature sets and thread counts.

/// Maps `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_ordered<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Runs `f` with internal parallelism capped at `threads`.
///
/// `threads == 1` (the default of the CLI) gives the single-threaded mode.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(err) => {
            log::warn!("could not build thread pool ({err}); running on the global pool");
            f()
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Whether this build was compiled with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
