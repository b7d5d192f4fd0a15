//! Bounded worker pools for data-parallel sample processing.

use rayon::ThreadPoolBuilder;

use crate::error::{Error, Result};

/// Runs `op` inside a dedicated pool of exactly `workers` threads.
pub fn with_workers<T, F>(workers: usize, op: F) -> Result<T>
where
    F: FnOnce() -> T + Send,
    T: Send,
{
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let pool = ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(op))
}
