//! Order-preserving parallel execution helpers.
//!
//! All data-parallel loops in this crate go through [`map_collect`]: results
//! come back in index order and every floating-point reduction over them runs
//! sequentially afterwards, so outputs are bitwise identical whether the
//! `parallel` feature is enabled, disabled, or suppressed at runtime with
//! [`run_sequential`]. The runtime switch exists so benchmarks can compare
//! both paths from one binary.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// True when rayon will actually be used for the data-parallel loops.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Run `f` with the data-parallel loops forced onto the sequential path.
///
/// The flag is process-global; since both paths produce identical results
/// this only ever affects timing, never values.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    let previous = FORCE_SEQUENTIAL.swap(true, Ordering::SeqCst);
    let result = f();
    FORCE_SEQUENTIAL.store(previous, Ordering::SeqCst);
    result
}

/// Configure the global rayon thread pool. `0` keeps the default size.
/// A no-op without the `parallel` feature. Errors (pool already built) are
/// ignored; the existing pool is kept.
pub fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// `(0..n).map(f)` collected in index order, parallel when available.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Map over a slice in index order, parallel when available.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Apply `f(index, chunk)` to consecutive `chunk_len` pieces of `data`,
/// parallel when available. `data.len()` must be a multiple of `chunk_len`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(data.len() % chunk_len.max(1), 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}
