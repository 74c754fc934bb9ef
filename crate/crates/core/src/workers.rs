use rayon::prelude::*;

/// Order-preserving parallel map over `items` on a pool of `workers` threads.
///
/// Output `i` always corresponds to input `i`, so any reduction done over the
/// returned vector is independent of scheduling.
pub(crate) fn par_map<T, R, F>(workers: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    let workers = workers.max(1);
    if workers == 1 || items.len() < 2 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()),
        Err(e) => {
            log::warn!("cannot start {workers} worker threads ({e}); running serially");
            items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
    }
}

/// Logical core count, at least 1.
pub fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
