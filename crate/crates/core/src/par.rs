//! Deterministic parallel helpers.
//!
//! Every helper produces output in a fixed order that does not depend on the
//! thread count, so builds with and without the `parallel` feature are
//! bit-identical. Reductions always happen by merging chunk results in chunk
//! index order.

/// Map over index chunks `[start, end)` of size `chunk`, returning results in
/// chunk order.
pub fn map_chunks<R, F>(len: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    let ranges: Vec<std::ops::Range<usize>> =
        (0..len).step_by(chunk).map(|s| s..(s + chunk).min(len)).collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

/// Apply `f` to disjoint mutable row bands of `data` (each band is
/// `rows_per_band * row_len` elements). Band index is passed to `f`.
pub fn for_each_band<T, F>(data: &mut [T], band_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let band_len = band_len.max(1);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(band_len).enumerate().for_each(|(i, band)| f(i, band));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(band_len).enumerate().for_each(|(i, band)| f(i, band));
    }
}

/// Parallel map over items by index, output in index order.
pub fn map_indexed<R, F>(len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}
