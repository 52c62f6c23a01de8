//! Thread-pool executor for the core crate's order-preserving `map`.

use lanetwin_core::harness::Executor;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Environment variable that forces deterministic, single-worker execution
/// when set to `1`, `true` or `yes`.
pub const DETERMINISTIC_ENV: &str = "LANETWIN_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV)
        .map(|v| matches!(v.trim().to_ascii_lowercase().as_str(), "1" | "true" | "yes"))
        .unwrap_or(false)
}

/// Results come back in index order whatever the worker count, so
/// reductions over them are bit-identical across `jobs` settings.
pub struct Pool {
    pool: rayon::ThreadPool,
    jobs: usize,
}

impl Pool {
    /// `jobs = 0` uses every available core.
    pub fn new(jobs: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let jobs = pool.current_num_threads();
        Ok(Pool { pool, jobs })
    }

    /// Honour the deterministic-mode variable by pinning one worker.
    pub fn from_settings(jobs: usize, deterministic: bool) -> Result<Self> {
        Pool::new(if deterministic { 1 } else { jobs })
    }

    pub fn jobs(&self) -> usize {
        self.jobs
    }
}

impl Executor for Pool {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        if self.jobs == 1 {
            return (0..n).map(f).collect();
        }
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}
