//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon, unless parallel
//! execution has been switched off at runtime through [`set_enabled`]. Without
//! the feature everything runs on the calling thread. Every helper produces
//! bitwise-identical results in both modes: work items never share a
//! floating-point reduction, and callers combine per-item partials in index
//! order.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Minimum number of work items before dispatching to the thread pool.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_ITEMS: usize = 2;

/// Toggle parallel execution at runtime. No-op without the `parallel` feature.
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::SeqCst);
}

/// Applies a worker count: 1 runs sequentially, 0 keeps the pool's default,
/// anything else sizes the global pool if it has not been built yet.
pub fn configure_threads(threads: usize) {
    set_enabled(threads != 1);
    #[cfg(feature = "parallel")]
    if threads > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            log::debug!("thread pool already configured: {e}");
        }
    }
}

/// Whether work is currently dispatched to the thread pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::SeqCst)
}

/// Calls `f(index, chunk)` for every `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && data.len() / chunk_len >= MIN_PARALLEL_ITEMS {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n >= MIN_PARALLEL_ITEMS {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
