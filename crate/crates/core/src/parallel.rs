//! Chunked data parallelism whose results never depend on the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "MAGIC_THREADS";

/// Worker count from `MAGIC_THREADS`, falling back to the core count.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Apply `f` to fixed-size chunks of `items` on `threads` workers and
/// concatenate the outputs in input order.
///
/// Chunk boundaries depend only on `chunk`, so every chunk sees the same
/// inputs whatever the thread count.
pub fn map_chunks<I, O, F>(items: &[I], chunk: usize, threads: usize, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&[I]) -> Result<Vec<O>> + Sync,
{
    if chunk == 0 {
        return Err(Error::invalid("chunk size must be positive"));
    }
    let run = || items.par_chunks(chunk).map(&f).collect::<Vec<Result<Vec<O>>>>();
    let parts = if threads <= 1 {
        items.chunks(chunk).map(&f).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(run)
    };
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
