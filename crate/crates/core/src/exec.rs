//! Data-parallel execution helpers.
//!
//! With the `parallel` feature the helpers fan work out over rayon's global
//! pool; without it (or after `set_parallel(false)`) they run the same
//! closures in order on the calling thread. Every helper writes disjoint
//! outputs and never reorders a floating-point reduction, so both paths give
//! bitwise-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Smallest number of scalar elements worth splitting across threads.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_ELEMS: usize = 1 << 14;

/// Toggle the rayon paths at runtime. Has no effect without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Run `f(row_index, row)` over consecutive `row_len`-sized rows of `data`.
pub fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(row_len > 0 && data.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() >= MIN_PARALLEL_ELEMS && data.len() > row_len {
        let min_rows = (MIN_PARALLEL_ELEMS / 4 / row_len).max(1);
        data.par_chunks_mut(row_len)
            .with_min_len(min_rows)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    data.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Like [`for_each_row`] but walks two buffers with their own row lengths in lockstep.
pub fn for_each_row2<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    assert!(a_len > 0 && b_len > 0);
    assert_eq!(a.len() / a_len, b.len() / b_len, "row counts differ");
    #[cfg(feature = "parallel")]
    if parallel_enabled() && a.len() + b.len() >= MIN_PARALLEL_ELEMS && a.len() > a_len {
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
        return;
    }
    a.chunks_mut(a_len)
        .zip(b.chunks_mut(b_len))
        .enumerate()
        .for_each(|(i, (ra, rb))| f(i, ra, rb));
}

/// Evaluate `f` for every index in `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_helper_visits_every_row_once() {
        let mut data = vec![0usize; 3 * 20_000];
        for_each_row(&mut data, 3, |i, row| row.iter_mut().for_each(|v| *v += i));
        for (i, row) in data.chunks(3).enumerate() {
            assert!(row.iter().all(|&v| v == i));
        }
    }

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }
}
