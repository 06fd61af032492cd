//! Data-parallel thread pool sized from `SPLATGEO_THREADS`.
//!
//! Every parallel reduction in the crate splits work into a fixed number of
//! chunks that does not depend on the pool size, so results are bit-identical
//! for any thread count.

use std::sync::OnceLock;

use rayon::ThreadPool;

pub const THREADS_ENV: &str = "SPLATGEO_THREADS";

fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
}

pub fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = configured_threads();
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("failed to build thread pool")
    })
}
