use std::sync::OnceLock;

use rayon::{ThreadPool, ThreadPoolBuilder};

pub const THREADS_ENV: &str = "ALIGNLAB_THREADS";

/// Worker pool shared by per-utterance forward/backward passes. Size comes
/// from `ALIGNLAB_THREADS` when set, otherwise from the machine.
pub fn pool() -> &'static ThreadPool {
    static POOL: OnceLock<ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("alignlab-{i}"))
            .build()
            .expect("thread pool")
    })
}
