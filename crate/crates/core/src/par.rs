//! Data-parallel map with a sequential fallback.
//!
//! Work is always split into the same index space and results are returned
//! in index order, so a parallel run and a sequential run produce identical
//! values. Reductions over the results are done by the caller in that order.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Rayon thread pool; behaves as `Sequential` without the `parallel` feature.
    Rayon,
}

static MODE: AtomicU8 = AtomicU8::new(1);

pub fn set_parallelism(mode: Parallelism) {
    MODE.store(mode as u8, Ordering::Relaxed);
}

pub fn parallelism() -> Parallelism {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    }
}

/// `(0..n).map(f).collect()`, fanned out across threads when enabled.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallelism() == Parallelism::Rayon {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
