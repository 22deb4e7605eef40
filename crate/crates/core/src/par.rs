//! Data-parallel execution helpers.
//!
//! Every parallel path in the crate goes through [`map_indices`], which
//! evaluates `f(i)` for each index and returns the results in index order.
//! Reductions over those results are always performed sequentially by the
//! caller, so the output is bit-identical whichever [`Mode`] is used.
//!
//! Without the `parallel` feature, [`Mode::Parallel`] silently degrades to
//! the sequential path.

/// Execution strategy for data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

impl Default for Mode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Mode::Parallel
        } else {
            Mode::Sequential
        }
    }
}

impl Mode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Mode::Parallel
    }
}

/// Evaluates `f` on `0..n`, returning results in index order.
pub fn map_indices<T, F>(mode: Mode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if mode.is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Applies `f` to each item of a slice, returning results in slice order.
pub fn map_slice<S, T, F>(mode: Mode, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Send + Sync,
{
    map_indices(mode, items.len(), |i| f(&items[i]))
}

/// Number of worker threads the parallel mode will use.
pub fn current_num_threads() -> usize {
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
    fn modes_agree_and_preserve_order() {
        let seq = map_indices(Mode::Sequential, 1000, |i| (i as f64).sqrt());
        let par = map_indices(Mode::Parallel, 1000, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
        assert_eq!(seq[9], 3.0);
    }

    #[test]
    fn empty_input() {
        let out: Vec<u8> = map_indices(Mode::Parallel, 0, |_| 1);
        assert!(out.is_empty());
    }
}
