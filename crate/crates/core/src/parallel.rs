//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature (default) [`Execution::Parallel`] fans work out
//! over rayon's global pool. Without it every call runs sequentially. Results
//! always come back in input order so reductions stay deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

impl Execution {
    /// `Parallel` when the crate was built with rayon, otherwise `Sequential`.
    pub fn best_available() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

pub fn map_ordered<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Like [`map_ordered`], but each worker owns a scratch value built by `init`.
/// `f` must leave the scratch state as it found it.
pub fn map_ordered_with<T, S, R, I, F>(items: &[T], exec: Execution, init: I, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, &T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map_init(&init, |s, t| f(s, t)).collect(),
        _ => {
            let mut state = init();
            items.iter().map(|t| f(&mut state, t)).collect()
        }
    }
}
