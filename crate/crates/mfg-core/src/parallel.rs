//! Data-parallel map helpers with a sequential fallback.
//!
//! All hot loops in the crate are embarrassingly parallel maps over a
//! pre-indexed range (paths, atoms, repetitions). Work is dispatched through
//! [`map_indexed`], which uses rayon when the `parallel` feature is enabled
//! and a plain loop otherwise. Because every slot derives its randomness from
//! its own index and reductions happen sequentially over the collected
//! vector, both execution modes produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

/// Execution mode for a mapped region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Rayon work-stealing; falls back to sequential when the `parallel`
    /// feature is disabled.
    Parallel,
}

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Globally force sequential execution (used by benchmarks to compare the two
/// code paths within one binary, and by `--workers 0`).
pub fn set_sequential_override(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn sequential_override() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Map `f` over `0..n` collecting results in index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    let mode = if sequential_override() {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    map_indexed_mode(mode, n, f)
}

/// Same as [`map_indexed`] with an explicit mode.
pub fn map_indexed_mode<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}
