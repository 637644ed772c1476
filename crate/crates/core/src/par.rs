//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it (or
//! while [`force_sequential`] is active) they run as plain loops. Every helper
//! preserves output order and per-element evaluation order, so results are
//! bit-identical between the two paths.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Work below this many scalar operations is never split across threads.
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Force (or release) the sequential path at runtime. Used by the benches to
/// compare both paths in a single build.
pub fn force_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::Relaxed)
}

fn worth_it(work: usize) -> bool {
    is_parallel() && work >= MIN_PARALLEL_WORK
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized chunk of `data`.
/// `work_per_chunk` is a rough operation count used to skip threading for
/// tiny problems.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, work_per_chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let chunks = data.len() / chunk_len;
        if worth_it(chunks.saturating_mul(work_per_chunk)) {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work_per_chunk;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && items.len() > 1 {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
