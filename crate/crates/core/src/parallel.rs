// SPDX-License-Identifier: Apache-2.0

//! Path-level parallelism. Results are always collected in path order, so the
//! worker count never changes what is computed.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "STIFFSIM_THREADS";

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .expect("failed to build worker pool")
    })
}

/// `f(0), .., f(n - 1)` evaluated on the worker pool, in index order.
pub fn map_paths<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    pool().install(|| (0..n).into_par_iter().map(f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_are_in_index_order() {
        let v = map_paths(1000, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
    }
}
