//! Deterministic data-parallel reductions.
//!
//! Work is split into fixed-width chunks independent of the thread count;
//! chunk results are collected in order and summed sequentially, so floating
//! point results are bit-identical for any pool size.

use rayon::prelude::*;

pub const CHUNK: usize = 256;

/// Sums per-chunk accumulators of length `width` over `0..len`.
pub fn chunked_sum<F>(len: usize, width: usize, body: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let n_chunks = len.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            body(c * CHUNK..((c + 1) * CHUNK).min(len), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

/// Builds a pool of `threads` workers (`None` or 0 means rayon's default).
pub fn pool(threads: Option<usize>) -> rayon::ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads.filter(|&n| n > 0) {
        builder = builder.num_threads(n);
    }
    builder.build().expect("thread pool")
}
