// SPDX-License-Identifier: Apache-2.0

//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon; without
//! it every call runs on the calling thread. Results are always returned in
//! index order and every element is computed by the same code path, so the
//! output is bit-identical either way.

/// How batch-level work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` when the crate was built with rayon support.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<I, T, F>(exec: Execution, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_range(exec, items.len(), |i| f(&items[i]))
}

// Work below this many multiply-adds stays on one thread.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

/// Runs `f(row_index, row)` over consecutive `width`-sized rows of `out`.
pub(crate) fn rows_mut<F>(out: &mut [f64], width: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= PAR_THRESHOLD {
        use rayon::prelude::*;
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    out.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}
