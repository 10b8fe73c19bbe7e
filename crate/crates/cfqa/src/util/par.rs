//! Data-parallel map with a sequential fallback.
//!
//! All parallel sites in this crate funnel through [`ordered_map`]: results
//! come back in input order, and every reduction downstream runs
//! sequentially over that order, so outputs are bit-identical with the
//! `parallel` feature on or off (and for any thread count).

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Sequential variant, always available (used by the benches for a
/// like-for-like comparison against the rayon path).
pub fn ordered_map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
