//! Thin facade over rayon so the data-parallel inner loops (abstraction grid
//! sampling, Monte-Carlo validation, fleet sweeps) can be compiled without the
//! `parallel` feature and still produce identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, in parallel when the `parallel` feature is enabled.
///
/// Results are returned in index order regardless of execution order, so the
/// output is independent of thread scheduling.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential counterpart of [`map_indexed`], kept available under every
/// feature combination so benchmarks can compare the two paths directly.
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Sum `f(i)` over `0..n` as f64, in parallel when enabled.
///
/// Parallel reduction order differs from the sequential one, so callers must
/// tolerate the usual floating-point reassociation (all uses here are
/// violation counters or statistically noisy sums).
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).sum()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).sum()
    }
}

/// Sequential counterpart of [`sum_indexed`].
pub fn sum_indexed_seq<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64,
{
    (0..n).map(f).sum()
}
