//! Per-member data parallelism.
//!
//! With the `parallel` feature the member loops run on the rayon pool;
//! without it they run sequentially. Outputs are always collected in member
//! order, so every downstream reduction sees the same sequence of values
//! regardless of thread count.
//!
//! Small batches, and any batch on a single-thread pool, run inline: the
//! fork-join cost would exceed the per-member work.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fewest items worth handing to the pool.
#[cfg(feature = "parallel")]
const MIN_PARALLEL: usize = 16;

#[cfg(feature = "parallel")]
fn worth_splitting(n: usize) -> bool {
    n >= MIN_PARALLEL && rayon::current_num_threads() > 1
}

/// Map `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if worth_splitting(n) {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f` to every element of `items` with its index.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if worth_splitting(items.len()) {
        items.par_iter_mut().enumerate().for_each(|(j, t)| f(j, t));
        return;
    }
    items.iter_mut().enumerate().for_each(|(j, t)| f(j, t));
}
