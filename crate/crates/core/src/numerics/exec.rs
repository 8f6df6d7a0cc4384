//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature, [`Exec::Parallel`] fans work out over the
//! rayon pool; without it, it runs in order on the calling thread. Results
//! always come back in index order, so reductions over them are fixed-order.

use crate::error::{GramError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn map_indexed<R, G>(self, n: usize, f: G) -> Vec<R>
    where
        R: Send,
        G: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            Exec::Parallel => par_map(n, f),
        }
    }

    /// Like [`Exec::map_indexed`] but stops at the first error (by index).
    pub fn try_map_indexed<R, G>(self, n: usize, f: G) -> Result<Vec<R>>
    where
        R: Send,
        G: Fn(usize) -> Result<R> + Sync + Send,
    {
        self.map_indexed(n, f).into_iter().collect()
    }
}

#[cfg(feature = "parallel")]
fn par_map<R: Send, G: Fn(usize) -> R + Sync + Send>(n: usize, f: G) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<R: Send, G: Fn(usize) -> R + Sync + Send>(n: usize, f: G) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Caps the global worker pool. Only the first call takes effect.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(GramError::config("thread count must be positive"));
    }
    #[cfg(feature = "parallel")]
    {
        // a pool that is already initialised keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let seq = Exec::Sequential.map_indexed(100, |i| i * i);
        let par = Exec::Parallel.map_indexed(100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn first_error_wins() {
        let out = Exec::Parallel.try_map_indexed(10, |i| if i >= 3 { Err(GramError::data(format!("{i}"))) } else { Ok(i) });
        match out {
            Err(GramError::Data(m)) => assert_eq!(m, "3"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
