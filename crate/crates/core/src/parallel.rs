//! Worker pools for per-image work.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "RFSCOPE_THREADS";

/// Worker count from `RFSCOPE_THREADS`, else the number of CPUs.
pub fn default_workers() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `0..n` on `workers` threads; results come back in index order.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Pairwise (tree) sum of equally sized vectors, combined in a fixed order
/// determined only by the index of each term.
pub fn pairwise_sum(mut terms: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    while terms.len() > 1 {
        let mut next = Vec::with_capacity(terms.len().div_ceil(2));
        let mut it = terms.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        terms = next;
    }
    terms.pop()
}
