//! Execution policy for data-parallel loops.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] fans work out over
//! the rayon pool; without it, or with [`Exec::Sequential`], loops run in
//! order on the calling thread. Results are always returned in input order,
//! so reductions over them stay deterministic either way.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    /// `f(0), f(1), …, f(n-1)` collected in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    pub fn map<I, R, F>(self, items: &[I], f: F) -> Vec<R>
    where
        I: Sync,
        R: Send,
        F: Fn(&I) -> R + Sync + Send,
    {
        self.map_range(items.len(), |i| f(&items[i]))
    }

    /// Like [`Exec::map_range`] but stops at the first error (by index).
    pub fn try_map_range<R, F>(self, n: usize, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        self.map_range(n, f).into_iter().collect()
    }
}

/// Sizes the global pool from `COPS_THREADS` (unset: all cores). Safe to call
/// more than once; later calls are no-ops.
pub fn configure_threads() -> Result<Option<usize>> {
    let requested = match std::env::var("COPS_THREADS") {
        Ok(s) => Some(
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::contract(format!("COPS_THREADS must be a positive integer, got {s:?}")))?,
        ),
        Err(_) => None,
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = requested {
        // an already-initialized pool keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(requested)
}
