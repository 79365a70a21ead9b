//! Data-parallel helpers. With the `parallel` feature (default) work is
//! spread over a rayon pool; without it every call runs sequentially.
//! Results are always returned in index order.

use crate::error::Result;

/// Environment variable capping the worker count of any parallel section.
pub const THREADS_ENV: &str = "BAYESCOPE_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Threads(usize),
}

impl Parallelism {
    /// `requested` workers, capped by `BAYESCOPE_THREADS` when set.
    pub fn capped(requested: usize) -> Self {
        let cap = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&c| c > 0);
        let n = cap.map_or(requested, |c| requested.min(c));
        if n <= 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Threads(n)
        }
    }

    pub fn threads(self) -> usize {
        match self {
            Parallelism::Sequential => 1,
            Parallelism::Threads(n) => n.max(1),
        }
    }
}

/// `(0..n).map(f)` evaluated with the requested parallelism.
pub fn map_indexed<R, F>(n: usize, par: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if par.threads() > 1 && n > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new()
                .num_threads(par.threads())
                .build()
            {
                return pool.install(|| (0..n).into_par_iter().map(&f).collect());
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = par;
    (0..n).map(f).collect()
}

/// Fallible [`map_indexed`]; the first error in index order wins.
pub fn try_map_indexed<R, F>(n: usize, par: Parallelism, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    map_indexed(n, par, f).into_iter().collect()
}
