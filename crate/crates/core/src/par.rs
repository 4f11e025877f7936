//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon; without it
//! they run the same closures in order on the calling thread. Work is always split
//! into fixed-size chunks that do not depend on the worker count, and any reduction
//! is performed by the caller over the ordered per-chunk results, so outputs are
//! bit-identical for every thread count.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Default number of voxels handled by one unit of work.
pub const VOXEL_CHUNK: usize = 4096;

/// Calls `f(start, chunk)` for consecutive chunks of `data`, where `start` is the
/// index of the chunk's first element.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i * chunk, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i * chunk, c));
}

/// Maps every index range of length `chunk` covering `0..n` and returns the results
/// in range order.
pub fn map_ranges<R, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Send + Sync,
{
    let chunk = chunk.max(1);
    let count = n.div_ceil(chunk);
    let range = move |i: usize| i * chunk..((i + 1) * chunk).min(n);
    #[cfg(feature = "parallel")]
    {
        (0..count).into_par_iter().map(|i| f(range(i))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(|i| f(range(i))).collect()
    }
}

/// Maps `f` over `0..n` and returns the results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
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

/// Fills `out[i] = f(i)` for every index.
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    for_each_chunk_mut(out, VOXEL_CHUNK, |start, chunk| {
        for (j, v) in chunk.iter_mut().enumerate() {
            *v = f(start + j);
        }
    });
}

/// Number of workers the helpers will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_everything_in_order() {
        let parts = map_ranges(10, 3, |r| r);
        assert_eq!(parts, vec![0..3, 3..6, 6..9, 9..10]);
        assert!(map_ranges(0, 3, |r| r).is_empty());
    }

    #[test]
    fn chunk_starts_are_absolute() {
        let mut v = vec![0usize; 11];
        for_each_chunk_mut(&mut v, 4, |start, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = start + j;
            }
        });
        assert_eq!(v, (0..11).collect::<Vec<_>>());
    }
}
