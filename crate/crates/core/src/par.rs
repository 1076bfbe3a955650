//! Execution helpers: rayon data-parallel loops with a sequential fallback.
//!
//! Compiled without the `parallel` feature every helper degenerates to a
//! plain sequential loop. With the feature enabled, [`set_force_sequential`]
//! still allows switching to the sequential path at runtime (used by the
//! `--deterministic`/`--threads 1` CLI flags and by the benchmark suite to
//! compare both paths in one process).
//!
//! Every helper is written so that parallel and sequential execution produce
//! bitwise-identical results: each work item owns a disjoint output region
//! and no helper performs an order-dependent reduction.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

pub fn set_force_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::SeqCst);
}

#[inline]
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Configure the global rayon pool size. Call before any parallel work;
/// later calls are ignored by rayon. No-op without the `parallel` feature.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if n >= 1 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Map over items, collecting results in input order.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if parallel_enabled() {
            return items.par_iter().map(&f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Map over an index range, collecting results in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if parallel_enabled() {
            return (0..n).into_par_iter().map(&f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Run `f` on equally sized disjoint chunks of `out`. `f(i, chunk)` fills
/// chunk `i`; chunk boundaries are `chunk_len` apart.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0 && out.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if parallel_enabled() {
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}
