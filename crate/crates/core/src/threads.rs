//! Worker-pool setup honoring the `PANORAMA_FORGE_THREADS` cap.

use std::sync::OnceLock;

use rayon::ThreadPool;

static POOL: OnceLock<ThreadPool> = OnceLock::new();

/// Shared pool for embarrassingly parallel work (rasterization, feature
/// extraction). Capped by `PANORAMA_FORGE_THREADS` when set.
pub fn pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let threads = std::env::var("PANORAMA_FORGE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0);
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        builder.build().expect("worker pool")
    })
}
