//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper splits work into chunks whose boundaries depend only on the
//! input size, never on the thread count, and reduces partial results in
//! index order. Results are therefore bit-identical between
//! [`ExecPolicy::Sequential`] and [`ExecPolicy::Parallel`], and between builds
//! with and without the `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How a data-parallel loop is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPolicy {
    Sequential,
    /// Uses rayon when the `parallel` feature is on, sequential otherwise.
    #[default]
    Parallel,
}

impl ExecPolicy {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indices<T, F>(policy: ExecPolicy, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy.is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = policy;
    (0..n).map(f).collect()
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk_mut<T, F>(policy: ExecPolicy, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if policy.is_parallel() && data.len() > chunk_len {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = policy;
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}
