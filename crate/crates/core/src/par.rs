//! Order-preserving parallel map over work-item indices.
//!
//! Results are always returned in index order, so reductions downstream are
//! deterministic whether or not the `parallel` feature is enabled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Like [`map_indexed`] but stops at the first error (by index order).
pub fn try_map_indexed<T, E, F>(count: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(count, f).into_iter().collect()
}

/// Applies `f` to every item in place; reports the first error by index.
pub fn try_for_each_mut<T, E, F>(items: &mut [T], f: F) -> Result<(), E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut T) -> Result<(), E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(), E>> = items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(), E>> = items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect();
    results.into_iter().collect()
}
