use rayon::prelude::*;

/// Thread pool with `jobs` workers; `None` or zero uses one per core.
pub fn pool(jobs: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?)
}

/// `f(0), ..., f(count - 1)` evaluated on `pool`, in index order.
pub fn ordered_map<T, F>(pool: &rayon::ThreadPool, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    pool.install(|| (0..count).into_par_iter().map(&f).collect())
}
