//! Order-preserving parallel map helpers.
//!
//! With the `parallel` feature enabled the closures run on the rayon pool;
//! without it they run sequentially. Both paths collect results in input
//! order, so downstream reductions see identical data either way.

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
///
/// Output order always matches input order.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential twin of [`map_collect`], available regardless of features.
///
/// Exists so benches and determinism tests can compare the two paths inside
/// one binary.
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
