//! Data-parallel map with a sequential fallback.
//!
//! Every batch loop in the crate (example generation, oracle checks,
//! per-story gradients, evaluation) goes through [`Exec`]. Results are always
//! returned in input order, so both strategies produce identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }

    /// Maps then folds the results left to right in input order, so
    /// floating-point reductions do not depend on scheduling.
    pub fn map_fold<T, R, A, F, G>(self, items: &[T], init: A, f: F, fold: G) -> A
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
        G: FnMut(A, R) -> A,
    {
        self.map(items, f).into_iter().fold(init, fold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Exec::Sequential.map(&xs, |x| x * x);
        let def = Exec::default().map(&xs, |x| x * x);
        assert_eq!(seq, def);
        let sum = Exec::default().map_fold(&xs, 0.0f64, |&x| (x as f64).sqrt(), |a, b| a + b);
        let seq_sum = Exec::Sequential.map_fold(&xs, 0.0f64, |&x| (x as f64).sqrt(), |a, b| a + b);
        assert_eq!(sum.to_bits(), seq_sum.to_bits());
        assert_eq!(Exec::Sequential.map_range(5, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }
}
