//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper produces bit-identical results under both strategies: work
//! is split into fixed blocks whose boundaries do not depend on the thread
//! count, and partial results are combined in block order.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar operations a parallel request runs sequentially.
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Block length used by [`sum_blocks`].
pub const SUM_BLOCK: usize = 4096;

/// Execution strategy for the data-parallel kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

impl Exec {
    /// Downgrades to sequential execution when `work` is too small to be
    /// worth distributing.
    pub fn for_work(self, work: usize) -> Exec {
        if work < MIN_PARALLEL_WORK {
            Exec::Sequential
        } else {
            self
        }
    }
}

/// Applies `f(row_index, row)` to every `row_len`-wide row of `data`.
pub fn for_each_row<F>(exec: Exec, data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    match exec {
        Exec::Sequential => data
            .chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => data
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
    }
}

/// Order-preserving map over `0..n`.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Sums `f` over consecutive blocks of `0..n`, combining block sums in order.
pub fn sum_blocks<F>(exec: Exec, n: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Sync + Send,
{
    let blocks = n.div_ceil(SUM_BLOCK);
    map_indices(exec, blocks, |b| {
        let start = b * SUM_BLOCK;
        f(start..(start + SUM_BLOCK).min(n))
    })
    .into_iter()
    .sum()
}
