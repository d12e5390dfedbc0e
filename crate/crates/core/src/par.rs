//! Index-parallel map with a sequential fallback.

/// Evaluates `f(0..n)` in index order. With the `parallel` feature and
/// `workers > 1` the calls fan out over the current rayon pool; results are
/// always returned in index order.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers > 1 && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = workers;
    (0..n).map(f).collect()
}

/// Number of workers usable by `map_indexed` in this build.
pub fn effective_workers(requested: usize) -> usize {
    if cfg!(feature = "parallel") {
        requested.max(1)
    } else {
        1
    }
}

/// Runs `f` inside a dedicated pool of `workers` threads when parallelism is
/// compiled in, otherwise calls it directly.
pub fn with_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if workers > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(f);
            }
        }
    }
    let _ = workers;
    f()
}
