//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) batch work such as hashing
//! blocks, auditing a store, or sweeping oracle trials runs on the rayon pool.
//! Without it, or when [`Strategy::Sequential`] is requested explicitly, the
//! same closures run on the calling thread. Results are always returned in
//! input order so callers never observe a difference besides wall time.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Rayon when compiled in, otherwise sequential.
    #[default]
    Auto,
    Sequential,
}

impl Strategy {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Strategy::Auto
    }
}

pub fn map<T, R, F>(strategy: Strategy, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if strategy.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = strategy;
    items.iter().map(f).collect()
}

/// Maps over `0..n`, in order.
pub fn map_range<R, F>(strategy: Strategy, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if strategy.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = strategy;
    (0..n).map(f).collect()
}

pub fn all<T, F>(strategy: Strategy, items: &[T], f: F) -> bool
where
    T: Sync,
    F: Fn(&T) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if strategy.is_parallel() {
        return items.par_iter().all(f);
    }
    let _ = strategy;
    items.iter().all(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree_and_keep_order() {
        let items: Vec<u64> = (0..10_000).collect();
        let a = map(Strategy::Auto, &items, |x| x * 3 + 1);
        let b = map(Strategy::Sequential, &items, |x| x * 3 + 1);
        assert_eq!(a, b);
        assert_eq!(a[17], 52);
        assert_eq!(map_range(Strategy::Auto, 5, |i| i * i), vec![0, 1, 4, 9, 16]);
        assert!(all(Strategy::Auto, &items, |x| *x < 10_000));
        assert!(!all(Strategy::Sequential, &items, |x| *x < 9_999));
    }
}
