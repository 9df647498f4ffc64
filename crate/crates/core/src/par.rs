//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature (on by default) work fans out over the rayon
//! pool. Without it, everything runs on the calling thread. Results are always
//! returned in input order, and callers reduce them sequentially, so the two
//! builds produce bitwise identical numbers.

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        par::map_range(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::map_range(n, f)
    }
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn chunks_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        par::chunks_mut(data, chunk, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        seq::chunks_mut(data, chunk, f)
    }
}

/// Sequential implementations, always available (used by benches for comparison).
pub mod seq {
    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R,
    {
        (0..n).map(f).collect()
    }

    pub fn chunks_mut<F>(data: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]),
    {
        for (i, c) in data.chunks_mut(chunk.max(1)).enumerate() {
            f(i, c);
        }
    }
}

/// Rayon-backed implementations.
#[cfg(feature = "parallel")]
pub mod par {
    use rayon::prelude::*;

    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        if n <= 1 || rayon::current_num_threads() == 1 {
            return (0..n).map(f).collect();
        }
        (0..n).into_par_iter().map(f).collect()
    }

    pub fn chunks_mut<F>(data: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if rayon::current_num_threads() == 1 {
            return super::seq::chunks_mut(data, chunk, f);
        }
        data.par_chunks_mut(chunk.max(1))
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}
